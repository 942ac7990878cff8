//! Synthetic four-point shape dataset.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PointCloud;
use crate::rotations::Rotation;

pub const NUM_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "line", "square", "tee", "ell", "zigzag", "corner", "screw", "tetrahedron",
];

/// Lattice coordinates of the base shapes. None is congruent to another, or
/// to another's mirror image, under rotation.
const SHAPES: [[[f64; 3]; 4]; NUM_CLASSES] = [
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 1.0, 0.0]],
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 1.0, 0.0]],
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [2.0, 1.0, 0.0]],
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]],
    [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]],
];

/// Base shape `class`, centered and scaled so its farthest point lies at
/// distance 1 from the centroid.
pub fn base_shape(class: usize) -> Vec<Vector3<f64>> {
    let pts: Vec<Vector3<f64>> = SHAPES[class].iter().map(|p| Vector3::from(*p)).collect();
    let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / pts.len() as f64;
    let centered: Vec<_> = pts.iter().map(|p| p - c).collect();
    let r = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
    centered.into_iter().map(|p| p / r).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: usize,
    /// Rotation already applied to the cloud (test split).
    pub rotation: Option<Rotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub classes: usize,
    /// Train clouds are stored in canonical orientation.
    pub train: Vec<Sample>,
    /// Whether training should rotate every train cloud at random.
    pub augment_rotations: bool,
    pub test: Vec<Sample>,
}

fn jittered(class: usize, normal: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let pts = base_shape(class)
        .into_iter()
        .map(|p| match normal {
            Some(n) => p + Vector3::from_fn(|_, _| n.sample(rng)),
            None => p,
        })
        .collect();
    PointCloud::new(pts)
}

/// `n_per_class` train and `n_per_class` test clouds for each of the eight
/// shapes, with Gaussian jitter of standard deviation `jitter` per
/// coordinate. Test clouds are rotated by recorded Haar-random rotations.
pub fn gen_tetris(n_per_class: usize, jitter: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidInput("n_per_class must be at least 1".into()));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::InvalidInput(format!("jitter must be a nonnegative number, got {jitter}")));
    }
    let normal = (jitter > 0.0).then(|| Normal::new(0.0, jitter).expect("valid std"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(NUM_CLASSES * n_per_class);
    let mut test = Vec::with_capacity(NUM_CLASSES * n_per_class);
    for class in 0..NUM_CLASSES {
        for _ in 0..n_per_class {
            train.push(Sample {
                cloud: jittered(class, normal.as_ref(), &mut rng)?,
                label: class,
                rotation: None,
            });
        }
    }
    for class in 0..NUM_CLASSES {
        for _ in 0..n_per_class {
            let cloud = jittered(class, normal.as_ref(), &mut rng)?;
            let r = Rotation::random_haar(&mut rng);
            test.push(Sample {
                cloud: cloud.rotate(&r),
                label: class,
                rotation: Some(r),
            });
        }
    }
    Ok(Dataset {
        classes: NUM_CLASSES,
        train,
        augment_rotations: true,
        test,
    })
}
