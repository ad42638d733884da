//! Scalar and label volumes, slicing along a configurable axis.

mod io;
mod phantom;

pub use io::{checksum_file, load_labels, load_scalar, load_volume, save_volume, AnyVolume, Dtype, Header};
pub use phantom::{
    jittered_dataset, make_phantom, standard_phantom_spec, PhantomDataset, PhantomObject, PhantomSpec, Shape,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2, Mask2, Slice2};

/// Voxel grid geometry shared by a volume and its labels.
///
/// Voxel `(x, y, z)` lives at linear index `x + nx * (y + ny * z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Geometry { dims, spacing })
    }

    pub fn cubic(n: usize) -> Self {
        Geometry {
            dims: [n, n, n],
            spacing: [1.0; 3],
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn extent(&self, axis: SliceAxis) -> usize {
        self.dims[axis.dim_index()]
    }

    /// (rows, cols) of a slice taken along `axis`.
    pub fn slice_dims(&self, axis: SliceAxis) -> (usize, usize) {
        let [nx, ny, nz] = self.dims;
        match axis {
            SliceAxis::Z => (ny, nx),
            SliceAxis::Y => (nz, nx),
            SliceAxis::X => (nz, ny),
        }
    }

    /// Linear voxel index of in-slice position `(r, c)` on slice `i`.
    fn slice_voxel(&self, axis: SliceAxis, i: usize, r: usize, c: usize) -> usize {
        match axis {
            SliceAxis::Z => self.index(c, r, i),
            SliceAxis::Y => self.index(c, i, r),
            SliceAxis::X => self.index(i, c, r),
        }
    }

    fn check_slice(&self, axis: SliceAxis, i: usize) -> Result<()> {
        let extent = self.extent(axis);
        if i >= extent {
            return Err(Error::IndexOutOfRange { index: i, extent });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SliceAxis {
    X,
    Y,
    #[default]
    Z,
}

impl SliceAxis {
    fn dim_index(self) -> usize {
        match self {
            SliceAxis::X => 0,
            SliceAxis::Y => 1,
            SliceAxis::Z => 2,
        }
    }
}

impl std::str::FromStr for SliceAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(SliceAxis::X),
            "y" => Ok(SliceAxis::Y),
            "z" => Ok(SliceAxis::Z),
            _ => Err(Error::Input(format!("unknown slice axis {s:?}"))),
        }
    }
}

/// 3D grid of finite f32 intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidVolume(format!(
                "{} values for dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData { index });
        }
        Ok(Volume { geometry, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn extent(&self, axis: SliceAxis) -> usize {
        self.geometry.extent(axis)
    }

    pub fn slice(&self, axis: SliceAxis, i: usize) -> Result<Slice2> {
        extract(&self.geometry, &self.data, axis, i)
    }

    /// Rebuild a volume from slices stacked along `axis`.
    pub fn from_slices(geometry: Geometry, axis: SliceAxis, slices: &[Slice2]) -> Result<Self> {
        let data = stack(&geometry, axis, slices, 0.0f32)?;
        Volume::new(geometry, data)
    }
}

/// Storage dtype of a label volume on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelDtype {
    U8,
    #[default]
    U16,
}

/// 3D grid of u16 labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    labels: Vec<u16>,
    label_set: Vec<u16>,
    dtype: LabelDtype,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != geometry.voxel_count() {
            return Err(Error::InvalidVolume(format!(
                "{} labels for dims {:?}",
                labels.len(),
                geometry.dims
            )));
        }
        let label_set: BTreeSet<u16> = labels.iter().copied().filter(|&l| l != 0).collect();
        Ok(LabelVolume {
            geometry,
            labels,
            label_set: label_set.into_iter().collect(),
            dtype: LabelDtype::U16,
        })
    }

    pub fn empty(geometry: Geometry) -> Self {
        LabelVolume {
            labels: vec![0; geometry.voxel_count()],
            geometry,
            label_set: Vec::new(),
            dtype: LabelDtype::U16,
        }
    }

    pub fn with_dtype(mut self, dtype: LabelDtype) -> Result<Self> {
        if dtype == LabelDtype::U8 && self.label_set.last().is_some_and(|&l| l > u8::MAX as u16) {
            return Err(Error::InvalidVolume("label exceeds u8 range".into()));
        }
        self.dtype = dtype;
        Ok(self)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Sorted distinct non-zero labels present.
    pub fn label_set(&self) -> &[u16] {
        &self.label_set
    }

    pub fn dtype(&self) -> LabelDtype {
        self.dtype
    }

    pub fn extent(&self, axis: SliceAxis) -> usize {
        self.geometry.extent(axis)
    }

    pub fn slice(&self, axis: SliceAxis, i: usize) -> Result<Grid2<u16>> {
        extract(&self.geometry, &self.labels, axis, i)
    }

    /// Binary mask of `label` on slice `i`.
    pub fn mask_slice(&self, axis: SliceAxis, i: usize, label: u16) -> Result<Mask2> {
        Ok(self.slice(axis, i)?.map(|&l| l == label))
    }

    /// Flat binary mask of `label` over the whole volume.
    pub fn mask(&self, label: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn from_slices(geometry: Geometry, axis: SliceAxis, slices: &[Grid2<u16>]) -> Result<Self> {
        let data = stack(&geometry, axis, slices, 0u16)?;
        LabelVolume::new(geometry, data)
    }
}

fn extract<T: Copy>(geometry: &Geometry, data: &[T], axis: SliceAxis, i: usize) -> Result<Grid2<T>> {
    geometry.check_slice(axis, i)?;
    let (rows, cols) = geometry.slice_dims(axis);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(data[geometry.slice_voxel(axis, i, r, c)]);
        }
    }
    Ok(Grid2::from_vec(rows, cols, out))
}

fn stack<T: Copy>(geometry: &Geometry, axis: SliceAxis, slices: &[Grid2<T>], fill: T) -> Result<Vec<T>> {
    let extent = geometry.extent(axis);
    if slices.len() != extent {
        return Err(Error::GeometryMismatch(format!(
            "{} slices for extent {extent}",
            slices.len()
        )));
    }
    let dims = geometry.slice_dims(axis);
    let mut data = vec![fill; geometry.voxel_count()];
    for (i, s) in slices.iter().enumerate() {
        if s.dims() != dims {
            return Err(Error::GeometryMismatch(format!(
                "slice {i} has dims {:?}, expected {dims:?}",
                s.dims()
            )));
        }
        for r in 0..dims.0 {
            for c in 0..dims.1 {
                data[geometry.slice_voxel(axis, i, r, c)] = *s.get(r, c);
            }
        }
    }
    Ok(data)
}

/// Fail unless a volume and its labels share geometry exactly.
pub fn check_pair(volume: &Volume, labels: &LabelVolume) -> Result<()> {
    if volume.geometry() != labels.geometry() {
        return Err(Error::GeometryMismatch(format!(
            "volume {:?}/{:?} vs labels {:?}/{:?}",
            volume.geometry().dims,
            volume.geometry().spacing,
            labels.geometry().dims,
            labels.geometry().spacing
        )));
    }
    Ok(())
}
