//! Dense voxel containers.
//!
//! [`Volume`] stores `channels` scalar fields over a 3-D grid, channel-major
//! then z, y, x ascending, so every channel (and every axial slice inside a
//! channel) is one contiguous run. [`LabelMap`] carries per-voxel class ids
//! plus the table of class names; [`Mask`] is a boolean annotation.

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Scalar element types a [`Volume`] may hold.
pub trait Element: Copy + Debug + PartialOrd + Default + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn is_finite(self) -> bool;
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Grid extent in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Voxels in one axial (z) slice.
    pub const fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub const fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.nx;
        let y = (index / self.nx) % self.ny;
        let z = index / (self.nx * self.ny);
        (x, y, z)
    }

    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.nx
            && (y as usize) < self.ny
            && (z as usize) < self.nz
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.voxels() == 0 {
            return Err(Error::shape(format!("dims must be positive, got {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

pub const DEFAULT_VOXEL_SIZE: [f32; 3] = [1.0, 1.0, 1.0];

fn validate_voxel_size(voxel_size: [f32; 3]) -> Result<()> {
    if voxel_size.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "voxel size must be strictly positive, got {voxel_size:?}"
        )))
    }
}

/// Multi-channel scalar volume. Immutable once built; all values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: Element = f32> {
    dims: Dims,
    channels: usize,
    voxel_size: [f32; 3],
    data: Vec<T>,
}

impl<T: Element> Volume<T> {
    pub fn new(dims: Dims, channels: usize, voxel_size: [f32; 3], data: Vec<T>) -> Result<Self> {
        dims.validate()?;
        validate_voxel_size(voxel_size)?;
        if channels == 0 {
            return Err(Error::shape("volume needs at least one channel"));
        }
        let expected = dims.voxels() * channels;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "data length {} does not match {dims}x{channels} = {expected}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Volume {
            dims,
            channels,
            voxel_size,
            data,
        })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Result<Self> {
        Self::new(
            dims,
            channels,
            DEFAULT_VOXEL_SIZE,
            vec![T::default(); dims.voxels() * channels],
        )
    }

    /// Builds a volume from `f(channel, voxel_index)`.
    pub fn from_fn(
        dims: Dims,
        channels: usize,
        voxel_size: [f32; 3],
        mut f: impl FnMut(usize, usize) -> T,
    ) -> Result<Self> {
        let n = dims.voxels();
        let mut data = Vec::with_capacity(n * channels);
        for c in 0..channels {
            for m in 0..n {
                data.push(f(c, m));
            }
        }
        Self::new(dims, channels, voxel_size, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.dims.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[c * self.dims.voxels() + self.dims.index(x, y, z)]
    }

    /// Values of every channel at one voxel.
    pub fn voxel(&self, index: usize) -> Vec<T> {
        let n = self.dims.voxels();
        (0..self.channels)
            .map(|c| self.data[c * n + index])
            .collect()
    }

    /// Axial slice `z` of channel `c`, row-major in (y, x).
    pub fn axial_slice(&self, c: usize, z: usize) -> &[T] {
        let s = self.dims.slice_len();
        let start = c * self.dims.voxels() + z * s;
        &self.data[start..start + s]
    }

    pub fn with_voxel_size(mut self, voxel_size: [f32; 3]) -> Result<Self> {
        validate_voxel_size(voxel_size)?;
        self.voxel_size = voxel_size;
        Ok(self)
    }

    /// Converts the element type, e.g. `Volume<f64>` to `Volume<f32>`.
    pub fn cast<U: Element>(&self) -> Result<Volume<U>> {
        Volume::new(
            self.dims,
            self.channels,
            self.voxel_size,
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }

    /// Keeps only the listed channels, in the listed order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(channels.len() * self.dims.voxels());
        for &c in channels {
            if c >= self.channels {
                return Err(Error::shape(format!(
                    "channel {c} out of range for {} channels",
                    self.channels
                )));
            }
            data.extend_from_slice(self.channel(c));
        }
        Self::new(self.dims, channels.len(), self.voxel_size, data)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Result<Self> {
        Self::new(
            self.dims,
            self.channels,
            self.voxel_size,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// Per-voxel class assignment plus its class table.
///
/// Class ids are implicit: entry `i` of the table is the name of class `i`,
/// so ids are always `0..N` and contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    voxel_size: [f32; 3],
    labels: Vec<u16>,
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(dims: Dims, labels: Vec<u16>, names: Vec<String>) -> Result<Self> {
        Self::with_voxel_size(dims, DEFAULT_VOXEL_SIZE, labels, names)
    }

    pub fn with_voxel_size(
        dims: Dims,
        voxel_size: [f32; 3],
        labels: Vec<u16>,
        names: Vec<String>,
    ) -> Result<Self> {
        dims.validate()?;
        validate_voxel_size(voxel_size)?;
        if names.is_empty() || names.len() > u16::MAX as usize + 1 {
            return Err(Error::shape(format!(
                "label table must have 1..=65536 entries, got {}",
                names.len()
            )));
        }
        if labels.len() != dims.voxels() {
            return Err(Error::shape(format!(
                "label count {} does not match {dims}",
                labels.len()
            )));
        }
        if let Some(index) = labels.iter().position(|&l| l as usize >= names.len()) {
            return Err(Error::LabelOutOfRange {
                index,
                label: labels[index] as u32,
                classes: names.len(),
            });
        }
        Ok(LabelMap {
            dims,
            voxel_size,
            labels,
            names,
        })
    }

    /// Names `class_0 .. class_{n-1}`.
    pub fn default_names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class_{i}")).collect()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `(id, name)` pairs.
    pub fn label_table(&self) -> impl Iterator<Item = (u16, &str)> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (i as u16, n.as_str()))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn axial_slice(&self, z: usize) -> &[u16] {
        let s = self.dims.slice_len();
        &self.labels[z * s..(z + 1) * s]
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Boolean per-voxel annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, values: Vec<bool>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.voxels() {
            return Err(Error::shape(format!(
                "mask length {} does not match {dims}",
                values.len()
            )));
        }
        Ok(Mask { dims, values })
    }

    pub fn empty(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![false; dims.voxels()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        self.values[index]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn invert(&self) -> Mask {
        Mask {
            dims: self.dims,
            values: self.values.iter().map(|v| !v).collect(),
        }
    }

    /// Two-class labelmap (`outside`, `inside`) for persistence.
    pub fn to_labelmap(&self) -> LabelMap {
        LabelMap {
            dims: self.dims,
            voxel_size: DEFAULT_VOXEL_SIZE,
            labels: self.values.iter().map(|&v| v as u16).collect(),
            names: vec!["outside".into(), "inside".into()],
        }
    }

    /// Nonzero labels become `true`.
    pub fn from_labelmap(lm: &LabelMap) -> Mask {
        Mask {
            dims: lm.dims,
            values: lm.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

/// One-hot encoding: channel `n` is 1 where the label equals `n`.
pub fn one_hot(lm: &LabelMap) -> Volume<f32> {
    let n = lm.dims.voxels();
    let mut data = vec![0.0f32; n * lm.num_classes()];
    for (m, &l) in lm.labels.iter().enumerate() {
        data[l as usize * n + m] = 1.0;
    }
    Volume {
        dims: lm.dims,
        channels: lm.num_classes(),
        voxel_size: lm.voxel_size,
        data,
    }
}

/// Index of the largest value; ties go to the lowest index.
#[inline]
pub fn argmax<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_val: Option<T> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best_val {
            Some(b) if !(v > b) => {}
            _ => {
                best = i;
                best_val = Some(v);
            }
        }
    }
    best
}

/// Per-voxel argmax over channels, labelled with `names`.
pub fn argmax_channels<T: Element>(v: &Volume<T>, names: Vec<String>) -> Result<LabelMap> {
    if names.len() != v.channels() {
        return Err(Error::shape(format!(
            "{} names for {} channels",
            names.len(),
            v.channels()
        )));
    }
    let n = v.dims().voxels();
    let labels = (0..n)
        .map(|m| argmax((0..v.channels()).map(|c| v.data[c * n + m])) as u16)
        .collect();
    LabelMap::with_voxel_size(v.dims(), v.voxel_size(), labels, names)
}
