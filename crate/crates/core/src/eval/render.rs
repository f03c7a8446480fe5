use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::format::write_file;
use crate::volume::{Element, LabelMap, Volume};

/// Axis normal to the rendered slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" | "sagittal" => Ok(Axis::X),
            "y" | "coronal" => Ok(Axis::Y),
            "z" | "axial" => Ok(Axis::Z),
            _ => Err(Error::config(format!("unknown axis {s:?}"))),
        }
    }
}

/// Fixed palette; label 0 is black and the rest cycle.
const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn label_color(label: u16) -> [u8; 3] {
    if label == 0 {
        [0, 0, 0]
    } else {
        PALETTE[(label as usize - 1) % PALETTE.len()]
    }
}

/// Voxel indices of one slice in image order: `z` slices are `x` by `y`,
/// the others put `z` upwards.
fn slice_indices(
    dims: crate::volume::Dims,
    axis: Axis,
    index: usize,
) -> Result<(usize, usize, Vec<usize>)> {
    let extent = match axis {
        Axis::X => dims.nx,
        Axis::Y => dims.ny,
        Axis::Z => dims.nz,
    };
    if index >= extent {
        return Err(Error::OutOfBounds(format!(
            "slice {index} along {axis} in {dims}"
        )));
    }
    let (w, h) = match axis {
        Axis::X => (dims.ny, dims.nz),
        Axis::Y => (dims.nx, dims.nz),
        Axis::Z => (dims.nx, dims.ny),
    };
    let mut out = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            out.push(match axis {
                Axis::X => dims.index(index, col, h - 1 - row),
                Axis::Y => dims.index(col, index, h - 1 - row),
                Axis::Z => dims.index(col, row, index),
            });
        }
    }
    Ok((w, h, out))
}

/// Binary PGM of one slice of `channel`, min-max scaled over the slice.
pub fn heatmap_pgm<T: Element>(
    field: &Volume<T>,
    channel: usize,
    axis: Axis,
    index: usize,
) -> Result<Vec<u8>> {
    if channel >= field.channels() {
        return Err(Error::OutOfBounds(format!(
            "channel {channel} of {}",
            field.channels()
        )));
    }
    let (w, h, idx) = slice_indices(field.dims(), axis, index)?;
    let data = field.channel(channel);
    let values: Vec<f64> = idx.iter().map(|&i| data[i].to_f64()).collect();
    if let Some(p) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: idx[p] });
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Binary PPM of one labelmap slice in the fixed palette.
pub fn labels_ppm(labels: &LabelMap, axis: Axis, index: usize) -> Result<Vec<u8>> {
    let (w, h, idx) = slice_indices(labels.dims(), axis, index)?;
    let mut out = format!("P6 {w} {h} 255\n").into_bytes();
    for &i in &idx {
        out.extend_from_slice(&label_color(labels.labels()[i]));
    }
    Ok(out)
}

pub fn render_heatmap<T: Element>(
    field: &Volume<T>,
    channel: usize,
    axis: Axis,
    index: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_file(path.as_ref(), &heatmap_pgm(field, channel, axis, index)?)
}

pub fn render_labels(
    labels: &LabelMap,
    axis: Axis,
    index: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_file(path.as_ref(), &labels_ppm(labels, axis, index)?)
}
