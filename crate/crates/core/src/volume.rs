//! Scalar volumes with spacing, orientation and modality metadata.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// MRI contrast of a scan. Synthetic cohorts beyond the named contrasts use
/// numbered modalities (`m5`, `m6`, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Modality {
    T1,
    T2,
    Flair,
    Dwi,
    Adc,
    Synthetic(u16),
}

const NAMED: [Modality; 5] = [
    Modality::T1,
    Modality::T2,
    Modality::Flair,
    Modality::Dwi,
    Modality::Adc,
];

impl Modality {
    /// The `i`-th modality in canonical order (t1, t2, flair, dwi, adc, m5, ...).
    pub fn nth(i: usize) -> Self {
        NAMED.get(i).copied().unwrap_or(Modality::Synthetic(i as u16))
    }

    /// Position in canonical order; inverse of [`Modality::nth`].
    pub fn index(self) -> usize {
        match self {
            Modality::Synthetic(i) => i as usize,
            m => NAMED.iter().position(|&n| n == m).expect("named modality"),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::T1 => f.write_str("t1"),
            Modality::T2 => f.write_str("t2"),
            Modality::Flair => f.write_str("flair"),
            Modality::Dwi => f.write_str("dwi"),
            Modality::Adc => f.write_str("adc"),
            Modality::Synthetic(i) => write!(f, "m{i}"),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let m = match lower.as_str() {
            "t1" => Modality::T1,
            "t2" => Modality::T2,
            "flair" => Modality::Flair,
            "dwi" => Modality::Dwi,
            "adc" => Modality::Adc,
            other => {
                let idx = other
                    .strip_prefix('m')
                    .and_then(|n| n.parse::<u16>().ok())
                    .ok_or_else(|| invalid(format!("unknown modality '{s}'")))?;
                Modality::nth(idx as usize)
            }
        };
        Ok(m)
    }
}

impl TryFrom<String> for Modality {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Modality> for String {
    fn from(m: Modality) -> String {
        m.to_string()
    }
}

/// Direction of each array axis in anatomical space, as a three-letter code
/// such as `RAS` or `LPI`. Letter `a` names the direction array axis `a`
/// increases towards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Orientation {
    /// World axis (0 = R/L, 1 = A/P, 2 = S/I) for each array axis.
    pub world_axis: [usize; 3],
    /// Whether each array axis points in the negative world direction (L, P, I).
    pub flipped: [bool; 3],
}

impl Orientation {
    pub const RAS: Orientation = Orientation {
        world_axis: [0, 1, 2],
        flipped: [false, false, false],
    };

    pub fn new(world_axis: [usize; 3], flipped: [bool; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &w in &world_axis {
            if w > 2 || seen[w] {
                return Err(invalid(format!("axis assignment {world_axis:?} is not a permutation")));
            }
            seen[w] = true;
        }
        Ok(Self { world_axis, flipped })
    }

    /// All 48 signed axis permutations.
    pub fn all() -> Vec<Orientation> {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut out = Vec::with_capacity(48);
        for p in perms {
            for bits in 0..8u8 {
                out.push(Orientation {
                    world_axis: p,
                    flipped: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
                });
            }
        }
        out
    }

    pub fn is_ras(&self) -> bool {
        *self == Self::RAS
    }
}

const LETTERS: [[char; 2]; 3] = [['R', 'L'], ['A', 'P'], ['S', 'I']];

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in 0..3 {
            let c = LETTERS[self.world_axis[a]][usize::from(self.flipped[a])];
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.trim().to_ascii_uppercase().chars().collect();
        if chars.len() != 3 {
            return Err(invalid(format!("orientation code '{s}' must have three letters")));
        }
        let mut world_axis = [0; 3];
        let mut flipped = [false; 3];
        for (a, ch) in chars.iter().enumerate() {
            let (w, neg) = LETTERS
                .iter()
                .enumerate()
                .find_map(|(w, pair)| pair.iter().position(|c| c == ch).map(|n| (w, n == 1)))
                .ok_or_else(|| invalid(format!("orientation code '{s}' has unknown letter '{ch}'")))?;
            world_axis[a] = w;
            flipped[a] = neg;
        }
        Orientation::new(world_axis, flipped).map_err(|_| invalid(format!("orientation code '{s}' repeats an axis")))
    }
}

impl TryFrom<String> for Orientation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Orientation> for String {
    fn from(o: Orientation) -> String {
        o.to_string()
    }
}

/// A 3D scan. `data[[i, j, k]]` is stored with `k` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
    orientation: Orientation,
    modality: Modality,
    brain_mask: Option<Array3<bool>>,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], orientation: Orientation, modality: Modality) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("spacing {spacing:?} must be strictly positive")));
        }
        if data.is_empty() {
            return Err(invalid("volume has no voxels"));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing,
            orientation,
            modality,
            brain_mask: None,
        })
    }

    /// Builds a 1 mm RAS volume from a flat buffer in `k`-fastest order.
    pub fn from_flat(shape: [usize; 3], data: Vec<f32>, modality: Modality) -> Result<Self> {
        let arr = Array3::from_shape_vec(shape, data).map_err(|e| invalid(e.to_string()))?;
        Self::new(arr, [1.0; 3], Orientation::RAS, modality)
    }

    pub fn with_mask(mut self, mask: Array3<bool>) -> Result<Self> {
        if mask.shape() != self.data.shape() {
            return Err(invalid(format!(
                "mask shape {:?} differs from data shape {:?}",
                mask.shape(),
                self.data.shape()
            )));
        }
        self.brain_mask = Some(mask.as_standard_layout().into_owned());
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.brain_mask = None;
        self
    }

    /// Uses the nonzero voxels as brain mask when none is attached.
    pub fn with_derived_mask(self) -> Self {
        if self.brain_mask.is_some() {
            return self;
        }
        let mask = self.data.mapv(|v| v != 0.0);
        self.with_mask(mask).expect("same shape")
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    /// Contiguous voxel buffer in `k`-fastest order.
    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("volumes are kept in standard layout")
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn brain_mask(&self) -> Option<&Array3<bool>> {
        self.brain_mask.as_ref()
    }

    /// Physical extent along each axis in millimetres.
    pub fn extent_mm(&self) -> [f64; 3] {
        let s = self.shape();
        [0, 1, 2].map(|a| s[a] as f64 * self.spacing[a])
    }

    pub(crate) fn replace(
        &self,
        data: Array3<f32>,
        spacing: [f64; 3],
        orientation: Orientation,
        mask: Option<Array3<bool>>,
    ) -> Volume {
        Volume {
            data: data.as_standard_layout().into_owned(),
            spacing,
            orientation,
            modality: self.modality,
            brain_mask: mask.map(|m| m.as_standard_layout().into_owned()),
        }
    }
}

/// Reorders and flips `arr` from `orientation` into RAS axis order.
pub fn to_ras<A: Clone>(arr: ArrayView3<'_, A>, orientation: Orientation) -> Array3<A> {
    // Output axis w takes the input axis pointing along world axis w.
    let mut perm = [0usize; 3];
    for (a, &w) in orientation.world_axis.iter().enumerate() {
        perm[w] = a;
    }
    let mut view = arr.permuted_axes(perm);
    for (w, &a) in perm.iter().enumerate() {
        if orientation.flipped[a] {
            view.invert_axis(Axis(w));
        }
    }
    view.as_standard_layout().into_owned()
}
