//! Problem-instance generators and point-cloud ingestion.
//!
//! A family fixes the distribution over (initial, terminal) measure pairs
//! plus the obstacle and default cost weights; `sample_instance` draws one
//! concrete configuration from it.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::BumpSet;
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::sample::SampleBatch;

/// Cost weights of the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfgWeights {
    pub transport: f64,
    pub interaction: f64,
    pub terminal: f64,
}

impl MfgWeights {
    pub fn validate(&self) -> Result<()> {
        if self.transport < 0.0 || self.interaction < 0.0 || self.terminal <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "weights must satisfy transport >= 0, interaction >= 0, terminal > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A sampled probability measure.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionSpec {
    IsotropicGaussian { mean: Vec<f64>, variance: f64 },
    GaussianMixture { centers: Vec<Vec<f64>>, variance: f64, weights: Vec<f64> },
    Empirical { points: SampleBatch, dequant_noise: f64 },
}

impl DistributionSpec {
    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::IsotropicGaussian { mean, .. } => mean.len(),
            DistributionSpec::GaussianMixture { centers, .. } => centers[0].len(),
            DistributionSpec::Empirical { points, .. } => points.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistributionSpec::IsotropicGaussian { variance, .. } => {
                if *variance <= 0.0 {
                    return Err(Error::InvalidParameter(format!("gaussian variance {variance} must be positive")));
                }
            }
            DistributionSpec::GaussianMixture { variance, weights, centers } => {
                if *variance <= 0.0 {
                    return Err(Error::InvalidParameter(format!("mixture variance {variance} must be positive")));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
                    return Err(Error::InvalidParameter("mixture weights must be non-negative and sum to 1".into()));
                }
                if weights.len() != centers.len() {
                    return Err(Error::InvalidParameter("one weight per mixture center required".into()));
                }
            }
            DistributionSpec::Empirical { points, .. } => {
                if points.is_empty() {
                    return Err(Error::InvalidParameter("empirical distribution needs at least one point".into()));
                }
            }
        }
        Ok(())
    }

    /// Mean of the measure (exact, not sampled).
    pub fn mean(&self) -> Vec<f64> {
        match self {
            DistributionSpec::IsotropicGaussian { mean, .. } => mean.clone(),
            DistributionSpec::GaussianMixture { centers, weights, .. } => {
                let d = centers[0].len();
                let mut m = vec![0.0; d];
                for (c, &w) in centers.iter().zip(weights) {
                    for (mi, &ci) in m.iter_mut().zip(c) {
                        *mi += w * ci;
                    }
                }
                m
            }
            DistributionSpec::Empirical { points, .. } => points.mean(),
        }
    }
}

/// Draw `n` iid samples from the measure.
pub fn sample_points(spec: &DistributionSpec, n: usize, rng: &mut ChaCha12Rng) -> Result<SampleBatch> {
    if n < 2 {
        return Err(Error::SampleSize { min: 2, got: n });
    }
    spec.validate()?;
    let d = spec.dim();
    let mut data = Vec::with_capacity(n * d);
    match spec {
        DistributionSpec::IsotropicGaussian { mean, variance } => {
            let sd = variance.sqrt();
            for _ in 0..n {
                for &m in mean {
                    let z: f64 = StandardNormal.sample(rng);
                    data.push(m + sd * z);
                }
            }
        }
        DistributionSpec::GaussianMixture { centers, variance, weights } => {
            let sd = variance.sqrt();
            for _ in 0..n {
                let mut u: f64 = rng.gen();
                let mut idx = 0;
                for (i, &w) in weights.iter().enumerate() {
                    if u < w {
                        idx = i;
                        break;
                    }
                    u -= w;
                    idx = i;
                }
                for &c in &centers[idx] {
                    let z: f64 = StandardNormal.sample(rng);
                    data.push(c + sd * z);
                }
            }
        }
        DistributionSpec::Empirical { points, dequant_noise } => {
            for _ in 0..n {
                let row = points.row(rng.gen_range(0..points.len()));
                if *dequant_noise > 0.0 {
                    for &x in row {
                        let z: f64 = StandardNormal.sample(rng);
                        data.push(x + dequant_noise * z);
                    }
                } else {
                    data.extend_from_slice(row);
                }
            }
        }
    }
    SampleBatch::new(data, n, d)
}

/// Gaussian-bump obstacle evaluated on the first two coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    bumps: Arc<BumpSet>,
}

impl Obstacle {
    pub fn new(means: Vec<[f64; 2]>, variances: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Obstacle> {
        if means.len() != variances.len() || means.len() != weights.len() || means.is_empty() {
            return Err(Error::InvalidParameter("obstacle needs matching non-empty bump lists".into()));
        }
        if variances.iter().any(|v| v[0] <= 0.0 || v[1] <= 0.0) {
            return Err(Error::InvalidParameter("obstacle covariances must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter("obstacle weights must sum to 1".into()));
        }
        Ok(Obstacle { bumps: Arc::new(BumpSet { means, variances, weights }) })
    }

    /// Single centered bump with covariance diag(0.5, 0.5).
    pub fn centered_disc() -> Obstacle {
        Obstacle::new(vec![[0.0, 0.0]], vec![[0.5, 0.5]], vec![1.0]).unwrap()
    }

    /// Two slanted bars: bumps at (-2, 1) and (2, -1), covariance
    /// diag(1, 0.3), equal weight.
    pub fn twin_bars() -> Obstacle {
        Obstacle::new(vec![[-2.0, 1.0], [2.0, -1.0]], vec![[1.0, 0.3], [1.0, 0.3]], vec![0.5, 0.5]).unwrap()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.bumps.density(x)
    }

    pub fn bumps(&self) -> Arc<BumpSet> {
        self.bumps.clone()
    }
}

/// One concrete MFG configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub dim: usize,
    pub p0: DistributionSpec,
    pub p1: DistributionSpec,
    pub obstacle: Option<Obstacle>,
    pub kernel: Kernel,
    pub weights: MfgWeights,
}

impl ProblemInstance {
    pub fn validate(&self) -> Result<()> {
        self.p0.validate()?;
        self.p1.validate()?;
        self.weights.validate()?;
        if self.p0.dim() != self.dim || self.p1.dim() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: self.p0.dim() });
        }
        Ok(())
    }
}

/// The configuration distributions used across the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// P0 centered, P1 an equal-variance translate with mean in [0.5, 1.5]^d.
    GaussianTranslate,
    /// Centered gaussian to an eight-component ring mixture of radius 4.
    GaussianToMixture,
    /// Antipodal gaussians on the circle of radius 3 with a central obstacle.
    CrowdMotion,
    /// Band-to-band transport around two slanted obstacle bars.
    PathPlanning,
    /// Source and destination resampled from externally loaded point clouds.
    PointCloud,
}

impl Family {
    pub fn parse(name: &str) -> Result<Family> {
        Ok(match name {
            "gaussian" => Family::GaussianTranslate,
            "gaussian-mixture" => Family::GaussianToMixture,
            "crowd-motion" => Family::CrowdMotion,
            "path-planning" => Family::PathPlanning,
            "point-cloud" => Family::PointCloud,
            other => {
                return Err(Error::Schema(format!(
                    "unknown family \"{other}\"; valid families: gaussian, gaussian-mixture, crowd-motion, path-planning, point-cloud"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::GaussianTranslate => "gaussian",
            Family::GaussianToMixture => "gaussian-mixture",
            Family::CrowdMotion => "crowd-motion",
            Family::PathPlanning => "path-planning",
            Family::PointCloud => "point-cloud",
        }
    }

    /// Default kernel: the translate family compares means only, so the
    /// linear kernel suffices; the mixture needs a characteristic kernel;
    /// obstacle problems default to the Gaussian kernel.
    pub fn default_kernel(&self) -> Kernel {
        match self {
            Family::GaussianTranslate => Kernel::Linear,
            Family::GaussianToMixture => Kernel::Laplacian { rate: 1.0 },
            Family::CrowdMotion | Family::PathPlanning => Kernel::Gaussian { bandwidth: 1.0 },
            Family::PointCloud => Kernel::Laplacian { rate: 1.0 },
        }
    }

    pub fn default_weights(&self) -> MfgWeights {
        match self {
            Family::GaussianTranslate => MfgWeights { transport: 5e-3, interaction: 0.0, terminal: 1.0 },
            Family::GaussianToMixture => MfgWeights { transport: 1e-3, interaction: 0.0, terminal: 1.0 },
            Family::CrowdMotion | Family::PathPlanning => MfgWeights { transport: 1e-3, interaction: 1.0, terminal: 1.0 },
            Family::PointCloud => MfgWeights { transport: 2e-2, interaction: 0.0, terminal: 1.0 },
        }
    }

    /// Whether instances carry time-dependent dynamics (an obstacle term).
    pub fn is_dynamic(&self) -> bool {
        matches!(self, Family::CrowdMotion | Family::PathPlanning)
    }
}

/// Family plus everything needed to draw instances.
#[derive(Debug, Clone)]
pub struct FamilyConfig {
    pub family: Family,
    pub dim: usize,
    pub kernel: Kernel,
    pub weights: MfgWeights,
    /// Source clouds for the point-cloud family.
    pub clouds: Vec<SampleBatch>,
    /// Dequantization noise applied when resampling clouds.
    pub dequant_noise: f64,
}

impl FamilyConfig {
    pub fn new(family: Family, dim: usize) -> FamilyConfig {
        FamilyConfig {
            family,
            dim,
            kernel: family.default_kernel(),
            weights: family.default_weights(),
            clouds: Vec::new(),
            dequant_noise: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if self.family.is_dynamic() && self.dim < 2 {
            return Err(Error::InvalidParameter("obstacle families need dimension >= 2".into()));
        }
        if self.family == Family::PointCloud && self.clouds.len() < 2 {
            return Err(Error::InvalidParameter("point-cloud family needs at least two source clouds".into()));
        }
        Ok(())
    }
}

fn embed2(dim: usize, x: f64, y: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = x;
    v[1] = y;
    v
}

/// Draw one problem configuration from the family distribution.
pub fn sample_instance(config: &FamilyConfig, rng: &mut ChaCha12Rng) -> Result<ProblemInstance> {
    config.validate()?;
    let d = config.dim;
    let (p0, p1, obstacle) = match config.family {
        Family::GaussianTranslate => {
            let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.5)).collect();
            let a: f64 = rng.gen_range(0.0..1.0);
            let variance = 0.1 + 0.9 * a * a;
            (
                DistributionSpec::IsotropicGaussian { mean: vec![0.0; d], variance },
                DistributionSpec::IsotropicGaussian { mean, variance },
                None,
            )
        }
        Family::GaussianToMixture => {
            let a: f64 = rng.gen_range(0.0..1.0);
            let variance0 = 0.1 + 0.7 * a * a;
            let s2: f64 = rng.gen_range(0.1..0.8);
            let centers: Vec<Vec<f64>> = (1..=8)
                .map(|i| {
                    let angle = std::f64::consts::PI / 4.0 * i as f64;
                    embed2(d, 4.0 * angle.cos(), 4.0 * angle.sin())
                })
                .collect();
            (
                DistributionSpec::IsotropicGaussian { mean: vec![0.0; d], variance: variance0 },
                DistributionSpec::GaussianMixture { centers, variance: s2, weights: vec![1.0 / 8.0; 8] },
                None,
            )
        }
        Family::CrowdMotion => {
            let theta: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            // 3 R_theta e2 rotated within the first two coordinates.
            let mx = -3.0 * theta.sin();
            let my = 3.0 * theta.cos();
            (
                DistributionSpec::IsotropicGaussian { mean: embed2(d, mx, my), variance: 0.3 },
                DistributionSpec::IsotropicGaussian { mean: embed2(d, -mx, -my), variance: 0.3 },
                Some(Obstacle::centered_disc()),
            )
        }
        Family::PathPlanning => {
            let m0 = (rng.gen_range(-4.0..4.0), rng.gen_range(3.0..4.0));
            let m1 = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..-3.0));
            (
                DistributionSpec::IsotropicGaussian { mean: embed2(d, m0.0, m0.1), variance: 0.1 },
                DistributionSpec::IsotropicGaussian { mean: embed2(d, m1.0, m1.1), variance: 0.1 },
                Some(Obstacle::twin_bars()),
            )
        }
        Family::PointCloud => {
            let i = rng.gen_range(0..config.clouds.len());
            let mut j = rng.gen_range(0..config.clouds.len() - 1);
            if j >= i {
                j += 1;
            }
            (
                DistributionSpec::Empirical { points: config.clouds[i].clone(), dequant_noise: config.dequant_noise },
                DistributionSpec::Empirical { points: config.clouds[j].clone(), dequant_noise: config.dequant_noise },
                None,
            )
        }
    };
    let instance = ProblemInstance {
        dim: d,
        p0,
        p1,
        obstacle,
        kernel: config.kernel,
        weights: config.weights,
    };
    instance.validate()?;
    Ok(instance)
}

/// Load point clouds from a CSV file (one point per row, optional header)
/// or from a directory of such files (sorted by name).
///
/// An empty file contributes no cloud.
pub fn load_point_cloud(path: &Path, expected_dim: usize) -> Result<Vec<SampleBatch>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
            .collect();
        files.sort();
        let mut clouds = Vec::new();
        for f in files {
            clouds.extend(load_point_cloud(&f, expected_dim)?);
        }
        return Ok(clouds);
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::Format { line, message: e.to_string() })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if row.len() != expected_dim {
                    return Err(Error::Schema(format!(
                        "line {line}: expected {expected_dim} coordinates, found {}",
                        row.len()
                    )));
                }
                rows.push(row);
            }
            Err(e) => {
                // A non-numeric first row is treated as a header.
                if idx == 0 {
                    continue;
                }
                return Err(Error::Format { line, message: e.to_string() });
            }
        }
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    Ok(vec![SampleBatch::from_rows(&rows)?])
}

/// Write a cloud in the same CSV format (no header).
pub fn save_point_cloud(path: &Path, cloud: &SampleBatch) -> Result<()> {
    let mut out = String::new();
    for i in 0..cloud.len() {
        let row: Vec<String> = cloud.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
