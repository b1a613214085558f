//! Exponential natural evolution strategy over a full covariance.
//!
//! The search distribution is N(μ, Σ) with Σ = e^A·(e^A)ᵀ for a symmetric
//! matrix A, so Σ = e^{2A} stays positive definite for any real A and the
//! covariance update is an unconstrained step in log space. Per generation:
//!
//! * sample λ standard normals nᵢ and candidates cᵢ = μ + e^A·nᵢ;
//! * rank candidates by fitness and convert ranks to zero-sum utilities
//!   uᵢ ∝ max(0, ln(λ/2+1) − ln rankᵢ), ties sharing the average of their
//!   positions' utilities;
//! * μ ← μ + η_μ·e^A·Σᵢ uᵢnᵢ and A ← A + (η_Σ/2)·Σᵢ uᵢ(nᵢnᵢᵀ − I).
//!
//! Because utilities depend only on the fitness ordering, any strictly
//! increasing transform of the fitness values leaves the trajectory
//! bit-for-bit unchanged; a generation whose fitness values are all equal
//! applies exactly zero update.

use crate::error::{Result, SnapError};
use crate::tensor::linalg::{matrix_exp, matrix_log_spd};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Default population size 4 + ⌊3 ln B⌋.
pub fn default_lambda(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

/// Default covariance learning rate (9 + 3 ln B) / (5·B·√B).
pub fn default_eta_sigma(dim: usize) -> f64 {
    let b = dim as f64;
    (9.0 + 3.0 * b.ln()) / (5.0 * b * b.sqrt())
}

/// Initial covariance of the search distribution.
#[derive(Debug, Clone)]
pub enum CovInit {
    /// Σ₀ = σ²·I.
    Isotropic(f64),
    /// Explicit symmetric positive definite Σ₀.
    Matrix(Tensor),
}

/// One generation's samples: `noises[i]` is the standard-normal draw behind
/// `candidates[i] = μ + e^A·noises[i]`.
#[derive(Debug, Clone)]
pub struct Population {
    pub noises: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Xnes {
    mu: Vec<f64>,
    a: Tensor,
    lambda: usize,
    eta_mu: f64,
    eta_sigma: f64,
    rng: ChaCha12Rng,
    generation: usize,
}

impl Xnes {
    /// Standard setup: default λ and learning rates for the dimension.
    pub fn new(mu0: &[f64], cov: CovInit, seed: u64) -> Result<Xnes> {
        let dim = mu0.len();
        Xnes::with_params(mu0, cov, default_lambda(dim), 1.0, default_eta_sigma(dim), seed)
    }

    pub fn with_params(
        mu0: &[f64],
        cov: CovInit,
        lambda: usize,
        eta_mu: f64,
        eta_sigma: f64,
        seed: u64,
    ) -> Result<Xnes> {
        let dim = mu0.len();
        if dim == 0 {
            return Err(SnapError::Config("search dimension must be positive".into()));
        }
        if lambda < 2 {
            return Err(SnapError::Config("population must hold at least two candidates".into()));
        }
        if eta_mu <= 0.0 || eta_sigma <= 0.0 {
            return Err(SnapError::Config("learning rates must be positive".into()));
        }
        let a = match cov {
            CovInit::Isotropic(sigma) => {
                if sigma <= 0.0 {
                    return Err(SnapError::Config("initial scale must be positive".into()));
                }
                let mut a = Tensor::zeros(&[dim, dim]);
                for i in 0..dim {
                    a.set2(i, i, sigma.ln());
                }
                a
            }
            CovInit::Matrix(s) => {
                if s.shape() != [dim, dim] {
                    return Err(SnapError::shape("xnes", "covariance does not match dimension"));
                }
                matrix_log_spd(&s)?.scale(0.5)
            }
        };
        Ok(Xnes {
            mu: mu0.to_vec(),
            a,
            lambda,
            eta_mu,
            eta_sigma,
            rng: ChaCha12Rng::seed_from_u64(seed),
            generation: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_cov_factor(&self) -> &Tensor {
        &self.a
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn eta_mu(&self) -> f64 {
        self.eta_mu
    }

    pub fn eta_sigma(&self) -> f64 {
        self.eta_sigma
    }

    /// Σ = e^{2A}.
    pub fn covariance(&self) -> Result<Tensor> {
        matrix_exp(&self.a.scale(2.0))
    }

    /// Draw one generation of candidates.
    pub fn ask(&mut self) -> Result<Population> {
        let dim = self.dim();
        let exp_a = matrix_exp(&self.a)?;
        let mut noises = Vec::with_capacity(self.lambda);
        let mut candidates = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let n: Vec<f64> =
                (0..dim).map(|_| StandardNormal.sample(&mut self.rng)).collect();
            let mut c = self.mu.clone();
            for (i, ci) in c.iter_mut().enumerate() {
                let row = exp_a.row(i);
                *ci += row.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>();
            }
            noises.push(n);
            candidates.push(c);
        }
        Ok(Population { noises, candidates })
    }

    /// Consume fitness values (higher is better) for a previously asked
    /// population and apply the natural-gradient update.
    pub fn tell(&mut self, pop: &Population, fitness: &[f64]) -> Result<()> {
        let dim = self.dim();
        if pop.noises.len() != self.lambda || fitness.len() != self.lambda {
            return Err(SnapError::Contract(format!(
                "expected {} fitness values, got {}",
                self.lambda,
                fitness.len()
            )));
        }
        if fitness.iter().any(|f| !f.is_finite()) {
            return Err(SnapError::Degenerate("fitness contains a non-finite value".into()));
        }
        let util = rank_utilities(fitness);
        self.generation += 1;
        if util.iter().all(|&u| u == 0.0) {
            return Ok(());
        }

        // Natural gradient in local coordinates.
        let mut g_mu = vec![0.0; dim];
        for (u, n) in util.iter().zip(&pop.noises) {
            for (g, v) in g_mu.iter_mut().zip(n) {
                *g += u * v;
            }
        }
        let u_sum: f64 = util.iter().sum();
        let mut g_a = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            for j in i..dim {
                let mut v = 0.0;
                for (u, n) in util.iter().zip(&pop.noises) {
                    v += u * n[i] * n[j];
                }
                if i == j {
                    v -= u_sum;
                }
                g_a.set2(i, j, v);
                g_a.set2(j, i, v);
            }
        }

        let exp_a = matrix_exp(&self.a)?;
        for i in 0..dim {
            let row = exp_a.row(i);
            self.mu[i] += self.eta_mu * row.iter().zip(&g_mu).map(|(a, b)| a * b).sum::<f64>();
        }
        self.a = self.a.add(&g_a.scale(self.eta_sigma / 2.0));
        Ok(())
    }
}

/// Zero-sum rank utilities, best candidate first. Tied fitness values share
/// the mean utility of the positions they span, so the result depends only
/// on the ordering. All-equal fitness yields all-zero utilities.
pub fn rank_utilities(fitness: &[f64]) -> Vec<f64> {
    let lambda = fitness.len();
    let first = fitness[0];
    if fitness.iter().all(|&f| f == first) {
        return vec![0.0; lambda];
    }
    let mut order: Vec<usize> = (0..lambda).collect();
    order.sort_by(|&i, &j| fitness[j].partial_cmp(&fitness[i]).unwrap().then(i.cmp(&j)));
    let base = (lambda as f64 / 2.0 + 1.0).ln();
    let raw: Vec<f64> =
        (0..lambda).map(|p| (base - ((p + 1) as f64).ln()).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    let q: Vec<f64> = raw.iter().map(|r| r / total).collect();

    let mut util = vec![0.0; lambda];
    let mut p = 0;
    while p < lambda {
        let mut end = p + 1;
        while end < lambda && fitness[order[end]] == fitness[order[p]] {
            end += 1;
        }
        let avg = q[p..end].iter().sum::<f64>() / (end - p) as f64;
        for &idx in &order[p..end] {
            util[idx] = avg - 1.0 / lambda as f64;
        }
        p = end;
    }
    util
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_population_sizes() {
        assert_eq!(default_lambda(8), 10);
        assert_eq!(default_lambda(20), 12);
        assert_eq!(default_lambda(156), 19);
        assert_eq!(default_lambda(1), 4);
    }

    #[test]
    fn default_covariance_rates() {
        assert!((default_eta_sigma(8) - 0.13468903345359237).abs() < 1e-15);
        assert!((default_eta_sigma(20) - 0.04022059481566826).abs() < 1e-15);
        assert!((default_eta_sigma(156) - 0.0024788626554570355).abs() < 1e-15);
    }

    #[test]
    fn utilities_match_hand_computation() {
        // λ=5, fitness [3,1,2,5,4]: descending order is idx 3,4,0,2,1.
        let u = rank_utilities(&[3.0, 1.0, 2.0, 5.0, 4.0]);
        let expect = [
            -0.12161282867924968, // rank 3
            -0.2,                 // rank 5 (raw 0)
            -0.2,                 // rank 4 (raw 0)
            0.43704257124121676,  // rank 1
            0.08457025743803293,  // rank 2
        ];
        for (a, b) in u.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(u.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn tied_candidates_share_average_utility() {
        let u = rank_utilities(&[1.0, 1.0, 0.0]);
        assert!((u[0] - u[1]).abs() < 1e-15);
        // Positions 1 and 2 hold all the raw mass, so the tied pair averages
        // to 1/2 each before centering.
        assert!((u[0] - (0.5 - 1.0 / 3.0)).abs() < 1e-12);
        assert!((u[2] - (-1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn all_equal_fitness_freezes_the_state() {
        let mut es = Xnes::new(&[1.0, -2.0, 0.5], CovInit::Isotropic(0.3), 9).unwrap();
        let pop = es.ask().unwrap();
        let mu_before = es.mu().to_vec();
        let a_before = es.log_cov_factor().clone();
        es.tell(&pop, &vec![0.7; es.lambda()]).unwrap();
        assert_eq!(es.mu(), &mu_before[..]);
        assert_eq!(*es.log_cov_factor(), a_before);
        assert_eq!(es.generation(), 1);
    }

    #[test]
    fn trajectory_is_invariant_under_monotone_fitness_transforms() {
        let run = |transform: fn(f64) -> f64| -> (Vec<f64>, Tensor) {
            let mut es = Xnes::new(&[0.0; 4], CovInit::Isotropic(0.5), 123).unwrap();
            for _ in 0..20 {
                let pop = es.ask().unwrap();
                let fit: Vec<f64> = pop
                    .candidates
                    .iter()
                    .map(|c| {
                        let d: f64 = c.iter().map(|x| (x - 1.0) * (x - 1.0)).sum();
                        transform(-d)
                    })
                    .collect();
                es.tell(&pop, &fit).unwrap();
            }
            (es.mu().to_vec(), es.log_cov_factor().clone())
        };
        let (mu_id, a_id) = run(|f| f);
        let (mu_aff, a_aff) = run(|f| 3.0 * f + 11.0);
        let (mu_exp, a_exp) = run(|f| f.exp());
        assert_eq!(mu_id, mu_aff);
        assert_eq!(a_id, a_aff);
        assert_eq!(mu_id, mu_exp);
        assert_eq!(a_id, a_exp);
    }

    #[test]
    fn optimizes_a_shifted_sphere() {
        let target = [2.0, -1.0, 0.5, 3.0, -0.25];
        let mut es = Xnes::new(&[0.0; 5], CovInit::Isotropic(1.0), 7).unwrap();
        for _ in 0..300 {
            let pop = es.ask().unwrap();
            let fit: Vec<f64> = pop
                .candidates
                .iter()
                .map(|c| -c.iter().zip(&target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>())
                .collect();
            es.tell(&pop, &fit).unwrap();
        }
        for (m, t) in es.mu().iter().zip(&target) {
            assert!((m - t).abs() < 1e-2, "{m} vs {t}");
        }
    }

    #[test]
    fn covariance_adapts_to_anisotropic_curvature() {
        // Fitness falls off 100× faster along x₀ than x₁: the search
        // distribution should stretch along x₁.
        let mut es = Xnes::new(&[0.0, 0.0], CovInit::Isotropic(1.0), 11).unwrap();
        for _ in 0..120 {
            let pop = es.ask().unwrap();
            let fit: Vec<f64> = pop
                .candidates
                .iter()
                .map(|c| -(10.0 * c[0] * c[0] + 0.1 * c[1] * c[1]))
                .collect();
            es.tell(&pop, &fit).unwrap();
        }
        let cov = es.covariance().unwrap();
        assert!(cov.at2(1, 1) > 4.0 * cov.at2(0, 0), "{:?}", cov);
    }

    #[test]
    fn matrix_init_round_trips_covariance() {
        let s = Tensor::from_vec(&[2, 2], vec![2.0, 0.6, 0.6, 1.0]);
        let es = Xnes::new(&[0.0, 0.0], CovInit::Matrix(s.clone()), 3).unwrap();
        let cov = es.covariance().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((cov.at2(i, j) - s.at2(i, j)).abs() < 1e-10);
            }
        }
        let iso = Xnes::new(&[0.0; 3], CovInit::Isotropic(0.25), 3).unwrap();
        let cov = iso.covariance().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0625 } else { 0.0 };
                assert!((cov.at2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_distinct() {
        let mut a = Xnes::new(&[0.0; 3], CovInit::Isotropic(0.5), 42).unwrap();
        let mut b = Xnes::new(&[0.0; 3], CovInit::Isotropic(0.5), 42).unwrap();
        let pa = a.ask().unwrap();
        let pb = b.ask().unwrap();
        assert_eq!(pa.candidates, pb.candidates);
        let mut c = Xnes::new(&[0.0; 3], CovInit::Isotropic(0.5), 43).unwrap();
        assert_ne!(pa.candidates, c.ask().unwrap().candidates);
    }

    #[test]
    fn candidate_spread_follows_the_initial_scale() {
        let mut es = Xnes::with_params(&[0.0; 2], CovInit::Isotropic(0.05), 64, 1.0, 0.1, 5)
            .unwrap();
        let pop = es.ask().unwrap();
        let spread: f64 = pop
            .candidates
            .iter()
            .flat_map(|c| c.iter().map(|x| x * x))
            .sum::<f64>()
            / (64.0 * 2.0);
        // E[x²] = σ² = 0.0025; loose factor-of-two band for 128 draws.
        assert!(spread > 0.00125 && spread < 0.005, "{spread}");
    }

    #[test]
    fn rejects_invalid_setup_and_fitness() {
        assert!(Xnes::new(&[], CovInit::Isotropic(1.0), 0).is_err());
        assert!(Xnes::new(&[0.0], CovInit::Isotropic(0.0), 0).is_err());
        assert!(Xnes::new(&[0.0; 2], CovInit::Matrix(Tensor::zeros(&[3, 3])), 0).is_err());
        let not_pd = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 2.0, 1.0]);
        assert!(Xnes::new(&[0.0; 2], CovInit::Matrix(not_pd), 0).is_err());

        let mut es = Xnes::new(&[0.0; 2], CovInit::Isotropic(1.0), 1).unwrap();
        let pop = es.ask().unwrap();
        assert!(es.tell(&pop, &[1.0]).is_err());
        let mut bad = vec![0.0; es.lambda()];
        bad[0] = f64::NAN;
        assert!(es.tell(&pop, &bad).is_err());
    }
}
