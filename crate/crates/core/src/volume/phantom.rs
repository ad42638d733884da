//! Synthetic phantoms with analytic ground truth.
//!
//! Shapes are defined in voxel-index coordinates: voxel `(x, y, z)` is the point
//! `(x, y, z)`. A voxel is labelled when that point lies inside the shape.

use serde::{Deserialize, Serialize};

use super::{Geometry, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Spherical shell `inner_radius <= |p - c| <= inner_radius + thickness`,
    /// restricted to the cap whose direction from the centre is within
    /// `acos(min_cos)` of `axis`.
    Shell {
        center: [f64; 3],
        inner_radius: f64,
        thickness: f64,
        axis: [f64; 3],
        min_cos: f64,
    },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Sphere { center, radius } => dist2(p, center) <= radius * radius,
            Shape::Ellipsoid { center, radii } => {
                (0..3).map(|k| ((p[k] - center[k]) / radii[k]).powi(2)).sum::<f64>() <= 1.0
            }
            Shape::Box { center, half_extents } => (0..3).all(|k| (p[k] - center[k]).abs() <= half_extents[k]),
            Shape::Shell {
                center,
                inner_radius,
                thickness,
                axis,
                min_cos,
            } => {
                let r2 = dist2(p, center);
                let outer = inner_radius + thickness;
                if r2 < inner_radius * inner_radius || r2 > outer * outer {
                    return false;
                }
                let an = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
                let dot: f64 = (0..3).map(|k| (p[k] - center[k]) * axis[k]).sum();
                dot >= min_cos * r2.sqrt() * an
            }
        }
    }

    pub fn center(&self) -> [f64; 3] {
        match *self {
            Shape::Sphere { center, .. }
            | Shape::Ellipsoid { center, .. }
            | Shape::Box { center, .. }
            | Shape::Shell { center, .. } => center,
        }
    }

    pub fn translated(&self, by: [f64; 3]) -> Shape {
        let shift = |c: [f64; 3]| [c[0] + by[0], c[1] + by[1], c[2] + by[2]];
        let mut s = self.clone();
        match &mut s {
            Shape::Sphere { center, .. }
            | Shape::Ellipsoid { center, .. }
            | Shape::Box { center, .. }
            | Shape::Shell { center, .. } => *center = shift(*center),
        }
        s
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomObject {
    pub label: u16,
    /// Added on top of the background inside the object.
    pub intensity: f32,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    #[serde(default)]
    pub background: f32,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub allow_overlap: bool,
    #[serde(default)]
    pub objects: Vec<PhantomObject>,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

/// Render a phantom. Labels depend only on the geometry; the seed only drives noise.
pub fn make_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, LabelVolume)> {
    let geometry = Geometry::new(spec.dims, spec.spacing)?;
    if !(spec.noise_std >= 0.0) {
        return Err(Error::InvalidVolume(format!("noise std {} < 0", spec.noise_std)));
    }
    if let Some(o) = spec.objects.iter().find(|o| o.label == 0) {
        return Err(Error::InvalidVolume(format!("object {:?} uses reserved label 0", o.shape)));
    }
    let [nx, ny, nz] = spec.dims;
    let n = geometry.voxel_count();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let idx = geometry.index(x, y, z);
                for (k, o) in spec.objects.iter().enumerate() {
                    if !o.shape.contains(p) {
                        continue;
                    }
                    if let Some(prev) = owner[idx] {
                        if !spec.allow_overlap {
                            return Err(Error::OverlapPolicyViolation { first: prev, second: k });
                        }
                    }
                    owner[idx] = Some(k);
                }
            }
        }
    }

    let mut noise = Stream::new("phantom.noise", seed);
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for own in &owner {
        let mut v = spec.background;
        let mut l = 0u16;
        if let Some(k) = own {
            v += spec.objects[*k].intensity;
            l = spec.objects[*k].label;
        }
        if spec.noise_std > 0.0 {
            v += (noise.normal() * spec.noise_std) as f32;
        }
        data.push(v);
        labels.push(l);
    }
    Ok((Volume::new(geometry, data)?, LabelVolume::new(geometry, labels)?))
}

/// The phantom family used by the end-to-end checks: two spheres of distinct
/// contrast and a thin curved shell capping the larger sphere, in a 64^3 grid.
pub fn standard_phantom_spec() -> PhantomSpec {
    PhantomSpec {
        dims: [64, 64, 64],
        spacing: [1.0; 3],
        background: 0.1,
        noise_std: 0.02,
        allow_overlap: false,
        objects: vec![
            PhantomObject {
                label: 1,
                intensity: 0.9,
                shape: Shape::Sphere {
                    center: [22.0, 26.0, 31.0],
                    radius: 12.0,
                },
            },
            PhantomObject {
                label: 2,
                intensity: 0.6,
                shape: Shape::Sphere {
                    center: [44.0, 44.0, 33.0],
                    radius: 10.0,
                },
            },
            PhantomObject {
                label: 3,
                intensity: 0.35,
                shape: Shape::Shell {
                    center: [22.0, 26.0, 31.0],
                    inner_radius: 17.0,
                    thickness: 3.0,
                    axis: [0.0, -1.0, 0.0],
                    min_cos: 0.5,
                },
            },
        ],
    }
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    /// `(id, image, labels)` in generation order.
    pub items: Vec<(String, Volume, LabelVolume)>,
}

impl PhantomDataset {
    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|(id, ..)| id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&(String, Volume, LabelVolume)> {
        self.items.iter().find(|(i, ..)| i == id)
    }
}

/// `n` phantoms from `base`, each object displaced by a random vector of length
/// at most `jitter` voxels and each volume given its own noise seed.
pub fn jittered_dataset(base: &PhantomSpec, n: usize, jitter: f64, seed: u64) -> Result<PhantomDataset> {
    let mut rng = Stream::new("phantom.jitter", seed);
    let mut items = Vec::with_capacity(n);
    for v in 0..n {
        let mut spec = base.clone();
        for o in &mut spec.objects {
            let d = random_in_ball(&mut rng, jitter);
            o.shape = o.shape.translated(d);
        }
        let noise_seed = seed.wrapping_mul(1_000_003).wrapping_add(v as u64);
        let (img, lab) = make_phantom(&spec, noise_seed)?;
        items.push((format!("phantom_{v:03}"), img, lab));
    }
    Ok(PhantomDataset { items })
}

fn random_in_ball(rng: &mut Stream, radius: f64) -> [f64; 3] {
    if radius <= 0.0 {
        return [0.0; 3];
    }
    loop {
        let d = [
            rng.uniform_range(-radius, radius),
            rng.uniform_range(-radius, radius),
            rng.uniform_range(-radius, radius),
        ];
        if d.iter().map(|x| x * x).sum::<f64>() <= radius * radius {
            return d;
        }
    }
}
