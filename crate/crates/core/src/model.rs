//! The MMPI model: several MPI fields, an optional centered cube and one shared
//! color head, with all learnable tensors held in a [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::{ColorHead, HeadConfig};
use crate::error::{Error, Result};
use crate::geometry::{MpiFrustum, Vec3};
use crate::grids::{CubeGrid, PlaneStack, ReliabilityGrid};
use crate::optim::{ParamGroup, ParamId, ParamStore};

/// Identifies the field a sample came from. MPIs order before the cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FieldId {
    Mpi(usize),
    Cube,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpiField {
    pub frustum: MpiFrustum,
    /// One-channel layout of the density planes.
    pub density_layout: PlaneStack,
    /// `D`-channel layout of the feature planes.
    pub feature_layout: PlaneStack,
    pub reliability_layout: ReliabilityGrid,
    pub density: ParamId,
    pub features: ParamId,
    pub reliability: ParamId,
    /// Added to the raw density before the softplus.
    pub density_shift: f64,
}

impl MpiField {
    pub fn planes(&self) -> usize {
        self.density_layout.planes()
    }

    /// NDC distance between neighbouring planes along the optical axis.
    pub fn axial_delta(&self) -> f64 {
        self.density_layout.spacing(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubeField {
    pub density_layout: CubeGrid,
    pub feature_layout: CubeGrid,
    pub density: ParamId,
    pub features: ParamId,
    /// Ray-marching step in units of the voxel edge.
    pub step_ratio: f64,
    pub density_shift: f64,
}

impl CubeField {
    pub fn step(&self) -> f64 {
        self.density_layout.voxel_edge() * self.step_ratio
    }

    /// Maps a world point into `[-1, 1]³` over the bounding box.
    pub fn normalized(&self, p: &Vec3) -> Vec3 {
        let g = &self.density_layout;
        Vec3::from_fn(|k, _| 2.0 * (p[k] - g.aabb_min[k]) / (g.aabb_max[k] - g.aabb_min[k]) - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpiSpec {
    pub frustum: MpiFrustum,
    pub res_x: usize,
    pub res_y: usize,
    pub planes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubeSpec {
    pub res: [usize; 3],
    pub aabb_min: Vec3,
    pub aabb_max: Vec3,
    pub step_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub mpis: Vec<MpiSpec>,
    pub cube: Option<CubeSpec>,
    pub head: HeadConfig,
    /// Opacity of one untrained sample at the default spacing.
    pub alpha_init: f64,
    /// Half-width of the uniform feature initialization.
    pub feature_init: f64,
}

#[derive(Clone, Debug)]
pub struct MmpiModel {
    pub store: ParamStore,
    pub mpis: Vec<MpiField>,
    pub cube: Option<CubeField>,
    pub head: ColorHead,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Shift `b` such that `1 - exp(-softplus(b) * delta) = alpha`.
pub fn density_shift_for(alpha: f64, delta: f64) -> f64 {
    let sigma = -(1.0 - alpha).ln() / delta;
    sigma.exp_m1().ln()
}

impl MmpiModel {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.mpis.is_empty() {
            return Err(Error::Config(
                "at least one MPI is required; the cube grid cannot be rendered on its own".into(),
            ));
        }
        if !(spec.alpha_init > 0.0 && spec.alpha_init < 1.0) {
            return Err(Error::Config(format!("alpha_init must lie in (0, 1), got {}", spec.alpha_init)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = spec.head.feature_dim;
        let mut mpis = Vec::with_capacity(spec.mpis.len());
        for (i, m) in spec.mpis.iter().enumerate() {
            let depths = PlaneStack::uniform_depths(m.planes);
            let density_layout = PlaneStack::new(1, m.res_x, m.res_y, depths.clone())?;
            let feature_layout = PlaneStack::new(d, m.res_x, m.res_y, depths)?;
            let reliability_layout = ReliabilityGrid::new(m.res_x, m.res_y, m.planes)?;
            let density = store.register(
                format!("mpi.{i}.density"),
                ParamGroup::MpiDensity,
                density_layout.shape(),
                vec![0.0; density_layout.len()],
            )?;
            let features = store.register(
                format!("mpi.{i}.features"),
                ParamGroup::MpiFeatures,
                feature_layout.shape(),
                uniform(&mut rng, feature_layout.len(), spec.feature_init),
            )?;
            let reliability = store.register(
                format!("mpi.{i}.reliability"),
                ParamGroup::Reliability,
                reliability_layout.grid.shape(),
                vec![0.0; reliability_layout.len()],
            )?;
            let density_shift = density_shift_for(spec.alpha_init, density_layout.spacing(0));
            mpis.push(MpiField {
                frustum: m.frustum,
                density_layout,
                feature_layout,
                reliability_layout,
                density,
                features,
                reliability,
                density_shift,
            });
        }
        let cube = match &spec.cube {
            None => None,
            Some(c) => {
                let density_layout = CubeGrid::new(1, c.res, c.aabb_min, c.aabb_max)?;
                let feature_layout = CubeGrid::new(d, c.res, c.aabb_min, c.aabb_max)?;
                if !(c.step_ratio > 0.0) {
                    return Err(Error::Config("cube step ratio must be positive".into()));
                }
                let density = store.register(
                    "cube.density",
                    ParamGroup::CubeDensity,
                    density_layout.shape(),
                    vec![0.0; density_layout.len()],
                )?;
                let features = store.register(
                    "cube.features",
                    ParamGroup::CubeFeatures,
                    feature_layout.shape(),
                    uniform(&mut rng, feature_layout.len(), spec.feature_init),
                )?;
                let step = density_layout.voxel_edge() * c.step_ratio;
                Some(CubeField {
                    density_layout,
                    feature_layout,
                    density,
                    features,
                    step_ratio: c.step_ratio,
                    density_shift: density_shift_for(spec.alpha_init, step),
                })
            }
        };
        let head = ColorHead::new(spec.head, &mut store, "head", &mut rng)?;
        Ok(MmpiModel {
            store,
            mpis,
            cube,
            head,
        })
    }

    pub fn mpi_count(&self) -> usize {
        self.mpis.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.config.feature_dim
    }

    /// Density `σ = softplus(raw + shift)` and its derivative with respect to `raw`.
    #[inline]
    pub fn activate(raw: f64, shift: f64) -> (f64, f64) {
        let x = raw + shift;
        (softplus(x), crate::appearance::sigmoid(x))
    }
}

fn uniform(rng: &mut impl Rng, n: usize, half_width: f64) -> Vec<f64> {
    if half_width == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| rng.random_range(-half_width..half_width)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;

    pub(crate) fn tiny_spec(k: usize, cube: bool) -> ModelSpec {
        let mpis = (0..k)
            .map(|i| MpiSpec {
                frustum: MpiFrustum::new(
                    Pose::look_at(
                        Vec3::zeros(),
                        Vec3::new((i as f64).sin(), 0.0, -(i as f64).cos()),
                        Vec3::y(),
                    )
                    .unwrap(),
                    1.0,
                    1.0,
                    0.5,
                )
                .unwrap(),
                res_x: 4,
                res_y: 3,
                planes: 5,
            })
            .collect();
        ModelSpec {
            mpis,
            cube: cube.then(|| CubeSpec {
                res: [3, 3, 3],
                aabb_min: Vec3::repeat(-1.0),
                aabb_max: Vec3::repeat(1.0),
                step_ratio: 0.5,
            }),
            head: HeadConfig {
                feature_dim: 4,
                pe_freqs_x: 1,
                pe_freqs_d: 1,
                hidden_width: 8,
                hidden_layers: 1,
            },
            alpha_init: 1e-3,
            feature_init: 1e-2,
        }
    }

    #[test]
    fn shift_gives_requested_alpha() {
        let b = density_shift_for(1e-3, 0.25);
        let alpha = 1.0 - (-softplus(b) * 0.25).exp();
        assert!((alpha - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn initialization_follows_defaults() {
        let m = MmpiModel::new(&tiny_spec(2, true), 1).unwrap();
        for f in &m.mpis {
            assert!(m.store.values(f.density).iter().all(|&v| v == 0.0));
            assert!(m.store.values(f.reliability).iter().all(|&v| v == 0.0));
            assert!(m.store.values(f.features).iter().all(|&v| v.abs() < 1e-2));
            let (sigma, _) = MmpiModel::activate(0.0, f.density_shift);
            assert!((1.0 - (-sigma * f.axial_delta()).exp() - 1e-3).abs() < 1e-12);
        }
        assert!(m.cube.is_some());
        assert_eq!(m.store.find("cube.features").map(|id| m.store.values(id).len()), Some(27 * 4));
    }

    #[test]
    fn model_needs_an_mpi() {
        assert!(MmpiModel::new(&tiny_spec(0, true), 1).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        let a = MmpiModel::new(&tiny_spec(2, true), 7).unwrap();
        let b = MmpiModel::new(&tiny_spec(2, true), 7).unwrap();
        assert_eq!(a.store, b.store);
    }
}
