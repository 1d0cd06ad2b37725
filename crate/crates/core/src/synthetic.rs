//! Synthetic embedding datasets for tests and demos.

use rand::Rng;

use crate::data::{Dataset, Example};
use crate::rng::{self, Stream};

/// Shape of a Gaussian-blob dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Distance of each class center from the origin.
    pub separation: f64,
    /// Per-coordinate standard deviation around the center.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec { n: 2000, dim: 16, classes: 5, separation: 1.0, noise: 1.0, seed: 0 }
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; 1 - u keeps the log argument away from zero.
    let u: f64 = 1.0 - rng.random::<f64>();
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// Isotropic Gaussian clusters. Centers are random directions scaled to
/// `separation`; labels cycle through the classes so every class occurs.
pub fn gaussian_blobs(spec: BlobSpec) -> Dataset {
    let mut rng = rng::stream_rng(spec.seed, Stream::Split, &[0x424c_4f42]);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| standard_normal(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * spec.separation).collect()
        })
        .collect();
    let width = spec.n.to_string().len();
    let examples = (0..spec.n)
        .map(|i| {
            let c = i % spec.classes;
            let embedding = centers[c].iter().map(|m| m + spec.noise * standard_normal(&mut rng)).collect();
            Example { id: format!("blob{i:0width$}"), embedding, label: Some(c), text: None }
        })
        .collect();
    Dataset::new(format!("blobs-{}x{}-c{}", spec.n, spec.dim, spec.classes), spec.classes, examples)
        .expect("generated examples are valid")
}
