//! Attribute prior, identity sampling, and single-attribute perturbation.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attrworld::{AttributeVector, Generator, Image, LatentVector, PhysicalParams};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const STD_FLOOR_VARIANCE: f64 = 1e-9;
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Gaussian prior `N(mean, covariance)` over attribute strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorModel {
    pub mean: Vec<f64>,
    /// Row-major `n × n`, ridge already added to the diagonal.
    pub covariance: Vec<f64>,
    pub per_attribute_std: Vec<f64>,
    pub ridge: f64,
}

impl PriorModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_row_slice(n, n, &self.covariance)
    }

    /// Builds a prior directly from moments (used for the world's own prior).
    pub fn from_moments(mean: Vec<f64>, covariance: Vec<f64>, ridge: f64) -> Result<Self> {
        let n = mean.len();
        if covariance.len() != n * n {
            return Err(Error::InvalidInput(format!(
                "covariance has {} entries, expected {}",
                covariance.len(),
                n * n
            )));
        }
        let per_attribute_std = (0..n)
            .map(|i| covariance[i * n + i].max(STD_FLOOR_VARIANCE).sqrt())
            .collect();
        let mut cov = covariance;
        for i in 0..n {
            cov[i * n + i] += ridge;
        }
        let prior = Self {
            mean,
            covariance: cov,
            per_attribute_std,
            ridge,
        };
        prior.cholesky()?;
        Ok(prior)
    }

    /// Lower-triangular Cholesky factor of the (ridged) covariance.
    pub fn cholesky(&self) -> Result<DMatrix<f64>> {
        let m = self.covariance_matrix();
        if (0..self.dim()).any(|i| (0..i).any(|j| m[(i, j)] != m[(j, i)])) {
            return Err(Error::Numerical("prior covariance is not symmetric".into()));
        }
        m.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::Numerical("prior covariance is not positive definite".into()))
    }

    pub fn sampler(&self) -> Result<PriorSampler> {
        Ok(PriorSampler {
            mean: DVector::from_column_slice(&self.mean),
            factor: self.cholesky()?,
        })
    }
}

/// Cached Cholesky factor for repeated draws.
#[derive(Clone, Debug)]
pub struct PriorSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl PriorSampler {
    pub fn sample(&self, rng: &mut Rng) -> AttributeVector {
        let eps = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &self.mean + &self.factor * eps;
        AttributeVector(y.iter().copied().collect())
    }
}

pub fn fit_attribute_prior(strengths: &[Vec<f64>], ridge: f64) -> Result<PriorModel> {
    let m = strengths.len();
    if m < 2 {
        return Err(Error::InsufficientData(format!(
            "prior fit needs at least 2 rows, got {m}"
        )));
    }
    let n = strengths[0].len();
    if n == 0 || strengths.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput("strength rows must share a non-zero length".into()));
    }
    if strengths.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("strength matrix contains non-finite values".into()));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "ridge must be finite and >= 0, got {ridge}"
        )));
    }
    let mut mean = vec![0.0; n];
    for row in strengths {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut cov = vec![0.0; n * n];
    for row in strengths {
        for i in 0..n {
            let di = row[i] - mean[i];
            for j in 0..=i {
                cov[i * n + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (m - 1) as f64;
    for i in 0..n {
        for j in 0..=i {
            let v = cov[i * n + j] / denom;
            cov[i * n + j] = v;
            cov[j * n + i] = v;
        }
    }
    PriorModel::from_moments(mean, cov, ridge)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub attribute: usize,
    pub y_minus: AttributeVector,
    pub y_plus: AttributeVector,
    pub minus_params: PhysicalParams,
    pub plus_params: PhysicalParams,
    pub minus_image: Image,
    pub plus_image: Image,
}

/// One draw `(y, z)` with its rendered image.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: u64,
    pub y: AttributeVector,
    pub z: LatentVector,
    pub params: PhysicalParams,
    pub base_image: Image,
    pub spectrum: Option<Spectrum>,
}

impl Identity {
    pub fn new(id: u64, y: AttributeVector, z: LatentVector, generator: &dyn Generator) -> Result<Self> {
        let params = generator.physical(&y, &z)?;
        let base_image = crate::attrworld::render_params(&params, generator.config());
        Ok(Self {
            id,
            y,
            z,
            params,
            base_image,
            spectrum: None,
        })
    }

    pub fn minus_image(&self) -> Option<&Image> {
        self.spectrum.as_ref().map(|s| &s.minus_image)
    }

    pub fn plus_image(&self) -> Option<&Image> {
        self.spectrum.as_ref().map(|s| &s.plus_image)
    }
}

pub fn sample_latent(n_latents: usize, rng: &mut Rng) -> LatentVector {
    LatentVector((0..n_latents).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

pub fn sample_identity(prior: &PriorModel, generator: &dyn Generator, id: u64, rng_seed: u64) -> Result<Identity> {
    let sampler = prior.sampler()?;
    sample_identity_with(&sampler, generator, id, rng_seed)
}

pub fn sample_identity_with(
    sampler: &PriorSampler,
    generator: &dyn Generator,
    id: u64,
    rng_seed: u64,
) -> Result<Identity> {
    let mut rng = seed::rng(rng_seed);
    let y = sampler.sample(&mut rng);
    let z = sample_latent(generator.latent_dim(), &mut rng);
    Identity::new(id, y, z, generator)
}

pub fn perturb_attribute(
    identity: &Identity,
    attribute: usize,
    prior: &PriorModel,
) -> Result<(AttributeVector, AttributeVector)> {
    perturb_vector(&identity.y, attribute, prior)
}

pub fn perturb_vector(
    y: &AttributeVector,
    attribute: usize,
    prior: &PriorModel,
) -> Result<(AttributeVector, AttributeVector)> {
    if attribute >= y.len() || attribute >= prior.dim() {
        return Err(Error::InvalidInput(format!(
            "attribute index {attribute} out of range for {} attributes",
            y.len()
        )));
    }
    let step = 2.0 * prior.per_attribute_std[attribute];
    let mut minus = y.clone();
    let mut plus = y.clone();
    minus.0[attribute] = y.0[attribute] - step;
    plus.0[attribute] = y.0[attribute] + step;
    Ok((minus, plus))
}

pub fn generate_spectrum(
    identity: &Identity,
    attribute: usize,
    prior: &PriorModel,
    generator: &dyn Generator,
) -> Result<Identity> {
    let (y_minus, y_plus) = perturb_attribute(identity, attribute, prior)?;
    let cfg = generator.config();
    let minus_params = generator.physical(&y_minus, &identity.z)?;
    let plus_params = generator.physical(&y_plus, &identity.z)?;
    let minus_image = crate::attrworld::render_params(&minus_params, cfg);
    let plus_image = crate::attrworld::render_params(&plus_params, cfg);
    let mut out = identity.clone();
    out.spectrum = Some(Spectrum {
        attribute,
        y_minus,
        y_plus,
        minus_params,
        plus_params,
        minus_image,
        plus_image,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrworld::{ground_truth_compare, Attribute, Comparison, ProceduralWorld, WorldConfig};

    fn world() -> ProceduralWorld {
        ProceduralWorld::new(WorldConfig::default()).unwrap()
    }

    fn unit_prior(n: usize) -> PriorModel {
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            cov[i * n + i] = 1.0;
        }
        PriorModel::from_moments(vec![0.0; n], cov, 0.0).unwrap()
    }

    #[test]
    fn two_row_fit() {
        let ridge = 1e-6;
        let p = fit_attribute_prior(&[vec![1.0, 0.0], vec![-1.0, 0.0]], ridge).unwrap();
        assert_eq!(p.mean, vec![0.0, 0.0]);
        assert!((p.covariance[0] - (2.0 + ridge)).abs() < 1e-15);
        assert!((p.covariance[3] - ridge).abs() < 1e-15);
        assert_eq!(p.covariance[1], 0.0);
        assert!((p.per_attribute_std[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((p.per_attribute_std[1] - STD_FLOOR_VARIANCE.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_give_ridge_covariance() {
        let rows = vec![vec![0.3, -1.0, 2.0]; 5];
        let p = fit_attribute_prior(&rows, 1e-4).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1e-4 } else { 0.0 };
                assert!((p.covariance[i * 3 + j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            fit_attribute_prior(&[vec![1.0]], 1e-6),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            fit_attribute_prior(&[vec![1.0], vec![f64::NAN]], 1e-6),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = unit_prior(4);
        let w = world();
        let a = sample_identity(&p, &w, 1, 99).unwrap();
        let b = sample_identity(&p, &w, 1, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_identity(&p, &w, 1, 100).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn perturbation_offsets() {
        let p = unit_prior(4);
        let (m, pl) = perturb_vector(&AttributeVector::zeros(4), 2, &p).unwrap();
        assert_eq!(m.0, vec![0.0, 0.0, -2.0, 0.0]);
        assert_eq!(pl.0, vec![0.0, 0.0, 2.0, 0.0]);

        let mut half = p.clone();
        half.per_attribute_std[0] = 0.5;
        let (m, pl) = perturb_vector(&AttributeVector(vec![1.0, 0.1, 0.2, 0.3]), 0, &half).unwrap();
        assert_eq!((m.0[0], pl.0[0]), (0.0, 2.0));
        assert_eq!(&m.0[1..], &[0.1, 0.2, 0.3]);
        assert!(perturb_vector(&AttributeVector::zeros(4), 4, &p).is_err());
    }

    #[test]
    fn spectrum_orders_driven_parameter() {
        let p = unit_prior(4);
        let w = world();
        for a in 0..4 {
            let id = sample_identity(&p, &w, 7, 1234 + a as u64).unwrap();
            let s = generate_spectrum(&id, a, &p, &w).unwrap();
            let spec = s.spectrum.as_ref().unwrap();
            let attr = Attribute::from_index(a, &w.cfg).unwrap();
            assert!(attr.driven_param(&spec.minus_params) < attr.driven_param(&id.params));
            assert!(attr.driven_param(&id.params) < attr.driven_param(&spec.plus_params));
            assert_eq!(
                ground_truth_compare(&spec.y_minus, &spec.y_plus, a, &w.cfg).unwrap(),
                Comparison::BMore
            );
            // every non-driven parameter is untouched
            let base = id.params.as_array();
            for other in [spec.minus_params.as_array(), spec.plus_params.as_array()] {
                for k in 0..7 {
                    if k != a {
                        assert_eq!(base[k].to_bits(), other[k].to_bits());
                    }
                }
            }
            let again = generate_spectrum(&id, a, &p, &w).unwrap();
            assert_eq!(s, again);
        }
    }
}
