//! Volume files: NIfTI-1 (`.nii`, `.nii.gz`) and a raw fallback format.
//!
//! The raw format is a little-endian header (`MVOL`, three `u32` extents,
//! three `f64` spacings, a three-letter orientation code) followed by the
//! voxels as `f32` in `k`-fastest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{invalid, Result};
use crate::volume::{Modality, Orientation, Volume};

const RAW_MAGIC: &[u8; 4] = b"MVOL";

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Reads a volume, choosing the format from the file extension.
pub fn read_volume(path: &Path, modality: Modality) -> Result<Volume> {
    if is_nifti(path) {
        read_nifti(path, modality)
    } else {
        read_raw(path, modality)
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    if is_nifti(path) {
        write_nifti(path, v.data(), v.spacing(), v.orientation())
    } else {
        write_raw(path, v)
    }
}

/// Reads a mask volume; any nonzero voxel is inside.
pub fn read_mask(path: &Path) -> Result<Array3<bool>> {
    let v = read_volume(path, Modality::T1)?;
    Ok(v.data().mapv(|x| x != 0.0))
}

pub fn write_mask(path: &Path, mask: &Array3<bool>, like: &Volume) -> Result<()> {
    let data = mask.mapv(|m| if m { 1.0f32 } else { 0.0 });
    if is_nifti(path) {
        write_nifti(path, &data, like.spacing(), like.orientation())
    } else {
        let v = Volume::new(data, like.spacing(), like.orientation(), like.modality())?;
        write_raw(path, &v)
    }
}

/// Voxel-to-world 3×3 linear part from the header: sform, else qform, else
/// the pixel dimensions.
fn header_axes(h: &NiftiHeader) -> [[f64; 3]; 3] {
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        return [0, 1, 2].map(|r| [0, 1, 2].map(|c| f64::from(rows[r][c])));
    }
    let pix = [1, 2, 3].map(|i| f64::from(h.pixdim[i]).abs().max(f64::MIN_POSITIVE));
    if h.qform_code > 0 {
        let (b, c, d) = (f64::from(h.quatern_b), f64::from(h.quatern_c), f64::from(h.quatern_d));
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [pix[0], pix[1], pix[2] * qfac];
        return [0, 1, 2].map(|row| [0, 1, 2].map(|col| r[row][col] * scale[col]));
    }
    [[pix[0], 0.0, 0.0], [0.0, pix[1], 0.0], [0.0, 0.0, pix[2]]]
}

/// Dominant world direction and length of each voxel axis.
fn orientation_from_axes(m: &[[f64; 3]; 3]) -> Result<(Orientation, [f64; 3])> {
    let mut world_axis = [0; 3];
    let mut flipped = [false; 3];
    let mut spacing = [0.0; 3];
    for col in 0..3 {
        let column = [m[0][col], m[1][col], m[2][col]];
        let (w, v) = column
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("three rows");
        world_axis[col] = w;
        flipped[col] = *v < 0.0;
        spacing[col] = column.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let o = Orientation::new(world_axis, flipped).map_err(|_| invalid("header affine is oblique beyond recovery"))?;
    Ok((o, spacing))
}

pub fn read_nifti(path: &Path, modality: Modality) -> Result<Volume> {
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header().clone();
    let arr = obj.into_volume().into_ndarray::<f32>()?;
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|_| invalid(format!("{} is not a 3D volume", path.display())))?;
    let (orientation, spacing) = orientation_from_axes(&header_axes(&header))?;
    Volume::new(arr.as_standard_layout().into_owned(), spacing, orientation, modality)
}

fn write_nifti(path: &Path, data: &Array3<f32>, spacing: [f64; 3], o: Orientation) -> Result<()> {
    let mut header = NiftiHeader::default();
    let mut rows = [[0f32; 4]; 3];
    for a in 0..3 {
        let sign = if o.flipped[a] { -1.0 } else { 1.0 };
        rows[o.world_axis[a]][a] = (sign * spacing[a]) as f32;
        header.pixdim[a + 1] = spacing[a] as f32;
    }
    header.pixdim[0] = 1.0;
    header.srow_x = rows[0];
    header.srow_y = rows[1];
    header.srow_z = rows[2];
    header.sform_code = 2;
    header.qform_code = 0;
    header.xyzt_units = 2;
    WriterOptions::new(path).reference_header(&header).write_nifti(data)?;
    Ok(())
}

pub fn write_raw(path: &Path, v: &Volume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RAW_MAGIC)?;
    for s in v.shape() {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    for s in v.spacing() {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(v.orientation().to_string().as_bytes())?;
    for &x in v.as_slice() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw(path: &Path, modality: Modality) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RAW_MAGIC {
        return Err(invalid(format!("{} is not a raw volume file", path.display())));
    }
    let mut shape = [0usize; 3];
    for s in &mut shape {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *s = u32::from_le_bytes(b) as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *s = f64::from_le_bytes(b);
    }
    let mut code = [0u8; 3];
    r.read_exact(&mut code)?;
    let orientation: Orientation = std::str::from_utf8(&code)
        .map_err(|_| invalid("orientation code is not ASCII"))?
        .parse()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let arr = Array3::from_shape_vec(shape, data).map_err(|e| invalid(e.to_string()))?;
    Volume::new(arr, spacing, orientation, modality)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(o: Orientation) -> Volume {
        let data = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        Volume::new(data, [1.0, 2.0, 0.5], o, Modality::Flair).unwrap()
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mvol");
        let v = sample("PSL".parse().unwrap());
        write_raw(&p, &v).unwrap();
        assert_eq!(read_raw(&p, Modality::Flair).unwrap(), v);
    }

    #[test]
    fn nifti_round_trip_keeps_orientation_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        for (name, code) in [("a.nii", "RAS"), ("b.nii.gz", "LPI"), ("c.nii.gz", "SRA")] {
            let p = dir.path().join(name);
            let v = sample(code.parse().unwrap());
            write_volume(&p, &v).unwrap();
            let back = read_volume(&p, Modality::Flair).unwrap();
            assert_eq!(back.orientation(), v.orientation(), "{name}");
            assert_eq!(back.spacing(), v.spacing());
            assert_eq!(back.data(), v.data());
        }
    }

    #[test]
    fn qform_rotation_is_decoded() {
        // 180° about z: quaternion (0, 0, 0, 1) maps i → -x, j → -y.
        let h = NiftiHeader {
            qform_code: 1,
            sform_code: 0,
            quatern_d: 1.0,
            pixdim: [1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0],
            ..NiftiHeader::default()
        };
        let (o, s) = orientation_from_axes(&header_axes(&h)).unwrap();
        assert_eq!(o.to_string(), "LPS");
        assert!((s[0] - 2.0).abs() < 1e-9 && (s[2] - 4.0).abs() < 1e-9);
    }
}
