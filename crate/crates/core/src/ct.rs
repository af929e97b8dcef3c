//! CT volume ingestion and preprocessing.
//!
//! Volumes are stored [D, H, W] with z slowest, matching the raw payload
//! order of the MHD container. World coordinates and per-axis spacing are
//! (x, y, z); voxel indices are (z, y, x). The preprocessing chain is:
//! resample to isotropic 1 mm, window HU into [0, 255], crop to the lung
//! mask's bounding box with an 8-voxel margin, pad non-lung voxels with 170.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fill value for voxels outside the lung mask and outside the scanned
/// range, chosen to read as soft tissue after windowing.
pub const PAD_VALUE: u8 = 170;
/// Cube edge of an extracted network input patch.
pub const PATCH_EXTENT: usize = 128;
/// Clamp range applied to raw HU before the affine map to [0, 255].
pub const HU_LO: f64 = -1200.0;
pub const HU_HI: f64 = 600.0;
/// Bounding-box margin, in voxels per side, when cropping to the lung mask.
pub const CROP_MARGIN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Voxels {
    /// Raw HU as signed 16-bit, straight from the scanner container.
    Hu(Vec<i16>),
    /// Windowed intensities in [0, 255].
    Windowed(Vec<u8>),
    /// Interpolated values, produced by resampling.
    Real(Vec<f64>),
}

impl Voxels {
    pub fn len(&self) -> usize {
        match self {
            Voxels::Hu(v) => v.len(),
            Voxels::Windowed(v) => v.len(),
            Voxels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            Voxels::Hu(v) => f64::from(v[i]),
            Voxels::Windowed(v) => f64::from(v[i]),
            Voxels::Real(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// [D, H, W] with z slowest.
    pub shape: [usize; 3],
    pub voxels: Voxels,
    /// Voxel edge lengths in mm, (x, y, z).
    pub spacing_mm: [f64; 3],
    /// World coordinate of voxel (0, 0, 0), (x, y, z).
    pub offset_mm: [f64; 3],
    /// Binary lung mask over the same grid, 0 = background.
    pub mask: Option<Vec<u8>>,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        voxels: Voxels,
        spacing_mm: [f64; 3],
        offset_mm: [f64; 3],
    ) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::shape(format!(
                "{} voxels do not fill extents {shape:?}",
                voxels.len()
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::data(format!("non-positive spacing {spacing_mm:?}")));
        }
        Ok(Volume {
            shape,
            voxels,
            spacing_mm,
            offset_mm,
            mask: None,
        })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.numel() {
            return Err(Error::shape(format!(
                "mask has {} voxels, volume has {}",
                mask.len(),
                self.numel()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn at_f64(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels.get_f64(self.index(z, y, x))
    }

    /// Windowed payload, or a usage error when the volume is not windowed yet.
    pub fn windowed(&self) -> Result<&[u8]> {
        match &self.voxels {
            Voxels::Windowed(v) => Ok(v),
            _ => Err(Error::usage("volume is not windowed")),
        }
    }

    /// [D, H, W] float tensor view of the voxel payload.
    pub fn to_tensor(&self) -> Tensor {
        let data = (0..self.numel()).map(|i| self.voxels.get_f64(i)).collect();
        Tensor::new(self.shape.to_vec(), data).expect("shape/payload checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ElementType {
    MetShort,
    MetUchar,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::MetShort),
            "MET_UCHAR" => Ok(ElementType::MetUchar),
            other => Err(Error::parse(format!("unknown ElementType `{other}`"))),
        }
    }

    fn byte_width(self) -> usize {
        match self {
            ElementType::MetShort => 2,
            ElementType::MetUchar => 1,
        }
    }
}

fn header_value<'a>(fields: &'a [(String, String)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::parse(format!("missing key `{key}` in MHD header")))
}

fn parse_triplet<T: std::str::FromStr>(value: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::parse(format!(
            "key `{key}` needs 3 values, got {}",
            parts.len()
        )));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::parse(format!("bad number `{p}` for key `{key}`")))?,
        );
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

/// Reads an MHD header and its raw little-endian payload.
///
/// DimSize/ElementSpacing/Offset are (x, y, z) per the container convention;
/// the payload runs z slowest, so the volume shape becomes [z, y, x].
pub fn read_mhd(header_path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(header_path)?;
    let mut fields = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            fields.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let dim: [usize; 3] = parse_triplet(header_value(&fields, "DimSize")?, "DimSize")?;
    let spacing: [f64; 3] =
        parse_triplet(header_value(&fields, "ElementSpacing")?, "ElementSpacing")?;
    let offset: [f64; 3] = parse_triplet(header_value(&fields, "Offset")?, "Offset")?;
    let etype = ElementType::parse(header_value(&fields, "ElementType")?)?;
    let data_file = header_value(&fields, "ElementDataFile")?;

    let data_path = header_path
        .parent()
        .map(|d| d.join(data_file))
        .unwrap_or_else(|| Path::new(data_file).to_path_buf());
    let payload = fs::read(&data_path)?;
    let n: usize = dim.iter().product();
    if payload.len() != n * etype.byte_width() {
        return Err(Error::parse(format!(
            "payload {} has {} bytes, DimSize {dim:?} as {etype:?} needs {}",
            data_path.display(),
            payload.len(),
            n * etype.byte_width()
        )));
    }
    let voxels = match etype {
        ElementType::MetShort => Voxels::Hu(
            payload
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]))
                .collect(),
        ),
        ElementType::MetUchar => Voxels::Windowed(payload),
    };
    Volume::new([dim[2], dim[1], dim[0]], voxels, spacing, offset)
}

/// Writes a volume as an MHD header plus raw payload next to it.
pub fn write_mhd(v: &Volume, header_path: &Path) -> Result<()> {
    let (etype, payload): (ElementType, Vec<u8>) = match &v.voxels {
        Voxels::Hu(d) => (
            ElementType::MetShort,
            d.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        Voxels::Windowed(d) => (ElementType::MetUchar, d.clone()),
        Voxels::Real(_) => {
            return Err(Error::usage(
                "interpolated volumes have no container dtype; window or quantize first",
            ))
        }
    };
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::usage("header path has no file stem"))?;
    let data_name = format!("{stem}.raw");
    let mut header = fs::File::create(header_path)?;
    writeln!(header, "ObjectType = Image")?;
    writeln!(header, "NDims = 3")?;
    writeln!(
        header,
        "DimSize = {} {} {}",
        v.shape[2], v.shape[1], v.shape[0]
    )?;
    writeln!(
        header,
        "ElementSpacing = {} {} {}",
        v.spacing_mm[0], v.spacing_mm[1], v.spacing_mm[2]
    )?;
    writeln!(
        header,
        "Offset = {} {} {}",
        v.offset_mm[0], v.offset_mm[1], v.offset_mm[2]
    )?;
    writeln!(
        header,
        "ElementType = {}",
        match etype {
            ElementType::MetShort => "MET_SHORT",
            ElementType::MetUchar => "MET_UCHAR",
        }
    )?;
    writeln!(header, "ElementDataFile = {data_name}")?;
    let data_path = header_path
        .parent()
        .map(|d| d.join(&data_name))
        .unwrap_or_else(|| Path::new(&data_name).to_path_buf());
    fs::write(data_path, payload)?;
    Ok(())
}

fn window_value(hu: f64) -> u8 {
    let clipped = hu.clamp(HU_LO, HU_HI);
    // f64::round ties away from zero, the rounding rule fixed for this map
    ((clipped - HU_LO) * 255.0 / (HU_HI - HU_LO)).round() as u8
}

/// Clamps HU into [-1200, 600] and maps the range linearly onto [0, 255].
pub fn hu_window(v: &Volume) -> Volume {
    let data = (0..v.numel()).map(|i| window_value(v.voxels.get_f64(i))).collect();
    Volume {
        shape: v.shape,
        voxels: Voxels::Windowed(data),
        spacing_mm: v.spacing_mm,
        offset_mm: v.offset_mm,
        mask: v.mask.clone(),
    }
}

/// Replaces voxels outside the lung mask with the pad value.
pub fn apply_mask_padding(v: &Volume) -> Result<Volume> {
    let mask = v
        .mask
        .as_ref()
        .ok_or_else(|| Error::usage("mask padding needs a lung mask"))?;
    let data = v.windowed()?;
    let out = data
        .iter()
        .zip(mask)
        .map(|(&val, &m)| if m == 0 { PAD_VALUE } else { val })
        .collect();
    Ok(Volume {
        shape: v.shape,
        voxels: Voxels::Windowed(out),
        spacing_mm: v.spacing_mm,
        offset_mm: v.offset_mm,
        mask: v.mask.clone(),
    })
}

/// Per-axis output extent when resampling to `target` mm.
fn resampled_extent(extent: usize, spacing: f64, target: f64) -> Result<usize> {
    let e = (extent as f64 * spacing / target).round() as usize;
    if e == 0 {
        return Err(Error::data(format!(
            "extent {extent} at {spacing} mm collapses to zero at {target} mm"
        )));
    }
    Ok(e)
}

fn trilinear_sample(v: &Volume, z: f64, y: f64, x: f64) -> f64 {
    let clampf = |p: f64, extent: usize| p.min((extent - 1) as f64).max(0.0);
    let (z, y, x) = (
        clampf(z, v.shape[0]),
        clampf(y, v.shape[1]),
        clampf(x, v.shape[2]),
    );
    let lo = |p: f64| p.floor() as usize;
    let hi = |p: f64, extent: usize| (lo(p) + 1).min(extent - 1);
    let (z0, y0, x0) = (lo(z), lo(y), lo(x));
    let (z1, y1, x1) = (hi(z, v.shape[0]), hi(y, v.shape[1]), hi(x, v.shape[2]));
    let (fz, fy, fx) = (z - z0 as f64, y - y0 as f64, x - x0 as f64);
    let mut acc = 0.0;
    for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                let w = wz * wy * wx;
                if w != 0.0 {
                    acc += w * v.at_f64(zi, yi, xi);
                }
            }
        }
    }
    acc
}

/// Trilinear resampling to isotropic spacing, corner-aligned
/// (source position = output index * target / spacing) with edge clamping.
/// The mask, when present, is resampled the same way and re-binarized at 0.5.
pub fn resample_isotropic(v: &Volume, target: f64) -> Result<Volume> {
    if !(target > 0.0) {
        return Err(Error::usage(format!("non-positive target spacing {target}")));
    }
    // spacing is (x, y, z); volume axes are [z, y, x]
    let out_shape = [
        resampled_extent(v.shape[0], v.spacing_mm[2], target)?,
        resampled_extent(v.shape[1], v.spacing_mm[1], target)?,
        resampled_extent(v.shape[2], v.spacing_mm[0], target)?,
    ];
    let step = [
        target / v.spacing_mm[2],
        target / v.spacing_mm[1],
        target / v.spacing_mm[0],
    ];
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for z in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for x in 0..out_shape[2] {
                data.push(trilinear_sample(
                    v,
                    z as f64 * step[0],
                    y as f64 * step[1],
                    x as f64 * step[2],
                ));
            }
        }
    }
    let mask = match &v.mask {
        Some(m) => {
            let mv = Volume::new(
                v.shape,
                Voxels::Real(m.iter().map(|&b| f64::from(b)).collect()),
                v.spacing_mm,
                v.offset_mm,
            )?;
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for z in 0..out_shape[0] {
                for y in 0..out_shape[1] {
                    for x in 0..out_shape[2] {
                        let s = trilinear_sample(
                            &mv,
                            z as f64 * step[0],
                            y as f64 * step[1],
                            x as f64 * step[2],
                        );
                        out.push(u8::from(s >= 0.5));
                    }
                }
            }
            Some(out)
        }
        None => None,
    };
    Ok(Volume {
        shape: out_shape,
        voxels: Voxels::Real(data),
        spacing_mm: [target, target, target],
        offset_mm: v.offset_mm,
        mask,
    })
}

/// World mm (x, y, z) to fractional voxel coordinates (x, y, z).
pub fn world_to_voxel(p_world: [f64; 3], v: &Volume) -> [f64; 3] {
    [
        (p_world[0] - v.offset_mm[0]) / v.spacing_mm[0],
        (p_world[1] - v.offset_mm[1]) / v.spacing_mm[1],
        (p_world[2] - v.offset_mm[2]) / v.spacing_mm[2],
    ]
}

/// Inverse of [`world_to_voxel`].
pub fn voxel_to_world(p_voxel: [f64; 3], v: &Volume) -> [f64; 3] {
    [
        p_voxel[0] * v.spacing_mm[0] + v.offset_mm[0],
        p_voxel[1] * v.spacing_mm[1] + v.offset_mm[1],
        p_voxel[2] * v.spacing_mm[2] + v.offset_mm[2],
    ]
}

/// Copies a cube with the given edge whose low corner (z, y, x) may lie
/// outside the volume; out-of-range voxels are pad-filled.
pub fn extract_cube(v: &Volume, corner: [i64; 3], extent: usize) -> Result<Tensor> {
    let data = v.windowed()?;
    let mut out = vec![f64::from(PAD_VALUE); extent * extent * extent];
    for z in 0..extent {
        let sz = corner[0] + z as i64;
        if sz < 0 || sz >= v.shape[0] as i64 {
            continue;
        }
        for y in 0..extent {
            let sy = corner[1] + y as i64;
            if sy < 0 || sy >= v.shape[1] as i64 {
                continue;
            }
            for x in 0..extent {
                let sx = corner[2] + x as i64;
                if sx < 0 || sx >= v.shape[2] as i64 {
                    continue;
                }
                out[(z * extent + y) * extent + x] =
                    f64::from(data[v.index(sz as usize, sy as usize, sx as usize)]);
            }
        }
    }
    Tensor::new(vec![1, extent, extent, extent], out)
}

/// Fixed-size network input patch at the given low corner (z, y, x).
pub fn extract_patch(v: &Volume, corner: [i64; 3]) -> Result<Tensor> {
    extract_cube(v, corner, PATCH_EXTENT)
}

/// Crops to the mask's bounding box expanded by `margin` voxels per side.
/// Returns the cropped volume (offset shifted accordingly) and the low
/// corner (z, y, x) of the crop in the input frame.
pub fn crop_to_mask(v: &Volume, margin: usize) -> Result<(Volume, [usize; 3])> {
    let mask = v
        .mask
        .as_ref()
        .ok_or_else(|| Error::usage("cropping needs a lung mask"))?;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..v.shape[0] {
        for y in 0..v.shape[1] {
            for x in 0..v.shape[2] {
                if mask[v.index(z, y, x)] != 0 {
                    let p = [z, y, x];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::data("lung mask is empty"));
    }
    let corner: [usize; 3] = std::array::from_fn(|a| lo[a].saturating_sub(margin));
    let end: [usize; 3] = std::array::from_fn(|a| (hi[a] + 1 + margin).min(v.shape[a]));
    let shape: [usize; 3] = std::array::from_fn(|a| end[a] - corner[a]);

    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut mout = Vec::with_capacity(n);
    let src = v.windowed()?;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let i = v.index(corner[0] + z, corner[1] + y, corner[2] + x);
                data.push(src[i]);
                mout.push(mask[i]);
            }
        }
    }
    // corner is (z, y, x); offset and spacing are (x, y, z)
    let offset = [
        v.offset_mm[0] + corner[2] as f64 * v.spacing_mm[0],
        v.offset_mm[1] + corner[1] as f64 * v.spacing_mm[1],
        v.offset_mm[2] + corner[0] as f64 * v.spacing_mm[2],
    ];
    let out = Volume {
        shape,
        voxels: Voxels::Windowed(data),
        spacing_mm: v.spacing_mm,
        offset_mm: offset,
        mask: Some(mout),
    };
    Ok((out, corner))
}

/// Sidecar written next to each preprocessed tensor so detections can be
/// mapped back to world coordinates exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spacing_mm: [f64; 3],
    pub offset_mm: [f64; 3],
    /// Low corner (z, y, x) of the mask crop in the resampled frame.
    pub crop_corner: [usize; 3],
}

/// Full preprocessing chain: resample to 1 mm, window, crop to mask, pad.
/// Without a mask the crop and padding stages are skipped.
pub fn preprocess_volume(v: &Volume) -> Result<(Volume, Sidecar)> {
    let resampled = resample_isotropic(v, 1.0)?;
    let windowed = hu_window(&resampled);
    if windowed.mask.is_none() {
        let sidecar = Sidecar {
            spacing_mm: windowed.spacing_mm,
            offset_mm: windowed.offset_mm,
            crop_corner: [0, 0, 0],
        };
        return Ok((windowed, sidecar));
    }
    let (cropped, corner) = crop_to_mask(&windowed, CROP_MARGIN)?;
    let padded = apply_mask_padding(&cropped)?;
    let sidecar = Sidecar {
        spacing_mm: padded.spacing_mm,
        offset_mm: padded.offset_mm,
        crop_corner: corner,
    };
    Ok((padded, sidecar))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub series_id: String,
    /// World mm (x, y, z).
    pub center_world_mm: [f64; 3],
    pub diameter_mm: f64,
}

impl Annotation {
    pub fn radius(&self) -> f64 {
        self.diameter_mm / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    /// id,x,y,z,diameter
    CenterDiameter,
    /// id,x1,y1,z1,x2,y2,z2; converted to midpoint center and max-edge
    /// diameter.
    CornerPair,
}

fn parse_f64(field: &str, line_no: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::parse(format!("line {line_no}: non-numeric field `{}`", field.trim()))
    })
}

pub fn parse_annotations(text: &str, format: AnnotationFormat) -> Result<Vec<Annotation>> {
    let mut lines = text.lines().enumerate();
    let (_, _header) = lines
        .next()
        .ok_or_else(|| Error::parse("annotation file is empty (missing header row)"))?;
    let want_fields = match format {
        AnnotationFormat::CenterDiameter => 5,
        AnnotationFormat::CornerPair => 7,
    };
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != want_fields {
            return Err(Error::parse(format!(
                "line {line_no}: expected {want_fields} fields, got {}",
                fields.len()
            )));
        }
        let series_id = fields[0].trim().to_string();
        let ann = match format {
            AnnotationFormat::CenterDiameter => {
                let x = parse_f64(fields[1], line_no)?;
                let y = parse_f64(fields[2], line_no)?;
                let z = parse_f64(fields[3], line_no)?;
                let d = parse_f64(fields[4], line_no)?;
                Annotation {
                    series_id,
                    center_world_mm: [x, y, z],
                    diameter_mm: d,
                }
            }
            AnnotationFormat::CornerPair => {
                let a: [f64; 3] = [
                    parse_f64(fields[1], line_no)?,
                    parse_f64(fields[2], line_no)?,
                    parse_f64(fields[3], line_no)?,
                ];
                let b: [f64; 3] = [
                    parse_f64(fields[4], line_no)?,
                    parse_f64(fields[5], line_no)?,
                    parse_f64(fields[6], line_no)?,
                ];
                let center = std::array::from_fn(|k| (a[k] + b[k]) / 2.0);
                let diameter = (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max);
                Annotation {
                    series_id,
                    center_world_mm: center,
                    diameter_mm: diameter,
                }
            }
        };
        if !(ann.diameter_mm > 0.0) {
            return Err(Error::parse(format!(
                "line {line_no}: non-positive diameter {}",
                ann.diameter_mm
            )));
        }
        out.push(ann);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<Annotation>> {
    parse_annotations(&fs::read_to_string(path)?, format)
}

/// Center/diameter CSV, the inverse of [`AnnotationFormat::CenterDiameter`]
/// parsing.
pub fn annotations_to_string(anns: &[Annotation]) -> String {
    let mut out = String::from("seriesuid,coordX,coordY,coordZ,diameter_mm\n");
    for a in anns {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            a.series_id,
            a.center_world_mm[0],
            a.center_world_mm[1],
            a.center_world_mm[2],
            a.diameter_mm
        ));
    }
    out
}
