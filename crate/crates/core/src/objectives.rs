//! Contrastive and reconstruction losses with their gradients, and the
//! negative-key queue.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::Real;

const UNIT_TOL: f64 = 1e-5;

fn norm(v: &[impl Real]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Fixed-capacity FIFO of unit-norm keys tagged with their subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeQueue {
    dim: usize,
    capacity: usize,
    keys: Vec<f32>,
    subjects: Vec<u32>,
    len: usize,
    /// Slot the next key is written to.
    cursor: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid("queue capacity and dimension must be positive"));
        }
        Ok(Self {
            dim,
            capacity,
            keys: vec![0.0; capacity * dim],
            subjects: vec![0; capacity],
            len: 0,
            cursor: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn occupancy(&self) -> f64 {
        self.len as f64 / self.capacity as f64
    }

    /// Appends `subjects.len()` keys, evicting the oldest once full.
    pub fn enqueue<T: Real>(&mut self, keys: &[T], subjects: &[u32]) -> Result<()> {
        let b = subjects.len();
        if b > self.capacity {
            return Err(invalid(format!(
                "cannot enqueue {b} keys into a queue of capacity {}",
                self.capacity
            )));
        }
        if keys.len() != b * self.dim {
            return Err(invalid(format!(
                "expected {b}×{} key values, got {}",
                self.dim,
                keys.len()
            )));
        }
        for (i, key) in keys.chunks_exact(self.dim).enumerate() {
            let n = norm(key);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(invalid(format!("key {i} has norm {n}, expected 1")));
            }
        }
        for (key, &s) in keys.chunks_exact(self.dim).zip(subjects) {
            let slot = self.cursor;
            for (dst, &x) in self.keys[slot * self.dim..(slot + 1) * self.dim].iter_mut().zip(key) {
                *dst = x.to_f32().unwrap_or(f32::NAN);
            }
            self.subjects[slot] = s;
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f32])> + '_ {
        let start = (self.cursor + self.capacity - self.len) % self.capacity;
        (0..self.len).map(move |i| {
            let slot = (start + i) % self.capacity;
            (self.subjects[slot], &self.keys[slot * self.dim..(slot + 1) * self.dim])
        })
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.iter().map(|(s, _)| s).collect()
    }

    /// Storage slots, subject slots, fill level and write cursor.
    pub fn raw_parts(&self) -> (&[f32], &[u32], usize, usize) {
        (&self.keys, &self.subjects, self.len, self.cursor)
    }

    pub fn from_raw_parts(
        capacity: usize,
        dim: usize,
        keys: Vec<f32>,
        subjects: Vec<u32>,
        len: usize,
        cursor: usize,
    ) -> Result<Self> {
        if capacity == 0
            || dim == 0
            || keys.len() != capacity * dim
            || subjects.len() != capacity
            || len > capacity
            || cursor >= capacity
        {
            return Err(invalid("inconsistent queue storage"));
        }
        Ok(Self {
            dim,
            capacity,
            keys,
            subjects,
            len,
            cursor,
        })
    }
}

/// InfoNCE value, its gradient with respect to the queries, and how many
/// batch items had no admissible negative.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNce<T> {
    pub loss: f64,
    pub grad_q: Vec<T>,
    pub items_without_negatives: usize,
}

impl<T> InfoNce<T> {
    pub fn degenerate(&self) -> bool {
        self.items_without_negatives > 0
    }
}

/// Mean over the batch of `-log softmax` of the positive logit against the
/// queued keys, skipping queued keys from the item's own subject.
pub fn info_nce<T: Real>(
    q: &[T],
    k_pos: &[T],
    queue: &NegativeQueue,
    subject_ids: &[u32],
    temperature: f64,
) -> Result<InfoNce<T>> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let d = queue.dim();
    let b = subject_ids.len();
    if b == 0 || q.len() != b * d || k_pos.len() != b * d {
        return Err(invalid(format!(
            "expected {b} queries and keys of dimension {d}, got {} and {} values",
            q.len(),
            k_pos.len()
        )));
    }
    for v in q.chunks_exact(d).chain(k_pos.chunks_exact(d)) {
        let n = norm(v);
        if (n - 1.0).abs() > 1e-3 {
            return Err(invalid(format!(
                "contrastive inputs must be unit vectors, found norm {n}"
            )));
        }
    }
    let dot = |a: &[T], b: &[f64]| a.iter().zip(b).map(|(x, y)| x.as_f64() * y).sum::<f64>();
    let mut loss = 0.0;
    let mut lonely = 0;
    let mut grad_q = vec![T::zero(); q.len()];
    for i in 0..b {
        let qi = &q[i * d..(i + 1) * d];
        let kp: Vec<f64> = k_pos[i * d..(i + 1) * d].iter().map(|x| x.as_f64()).collect();
        let negs: Vec<Vec<f64>> = queue
            .iter()
            .filter(|(s, _)| *s != subject_ids[i])
            .map(|(_, k)| k.iter().map(|&x| f64::from(x)).collect())
            .collect();
        if negs.is_empty() {
            lonely += 1;
            continue;
        }
        let mut logits = Vec::with_capacity(negs.len() + 1);
        logits.push(dot(qi, &kp) / temperature);
        logits.extend(negs.iter().map(|n| dot(qi, n) / temperature));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += max + z.ln() - logits[0];
        // d/dq = (Σ p_j k_j - k⁺) / τ, averaged over the batch
        let scale = 1.0 / (temperature * b as f64);
        let mut g: Vec<f64> = kp.iter().map(|x| x * ((logits[0] - max).exp() / z - 1.0)).collect();
        for (n, l) in negs.iter().zip(&logits[1..]) {
            let p = (l - max).exp() / z;
            g.iter_mut().zip(n).for_each(|(gv, x)| *gv += p * x);
        }
        for (dst, gv) in grad_q[i * d..(i + 1) * d].iter_mut().zip(g) {
            *dst = T::lit(gv * scale);
        }
    }
    Ok(InfoNce {
        loss: loss / b as f64,
        grad_q,
        items_without_negatives: lonely,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconLoss<T> {
    pub loss: f64,
    pub grad: Vec<T>,
    pub masked_voxels: usize,
}

/// Mean squared error over voxels where `mask` is set; 0 when nothing is
/// masked.
pub fn masked_recon_loss<T: Real>(pred: &[T], target: &[T], mask: &[bool]) -> Result<ReconLoss<T>> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(invalid(format!(
            "prediction, target and mask sizes differ: {} / {} / {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![T::zero(); pred.len()];
    if count == 0 {
        return Ok(ReconLoss {
            loss: 0.0,
            grad,
            masked_voxels: 0,
        });
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        let e = pred[i].as_f64() - target[i].as_f64();
        sum += e * e;
        grad[i] = T::lit(2.0 * e * inv);
    }
    Ok(ReconLoss {
        loss: sum * inv,
        grad,
        masked_voxels: count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cl: f64,
    pub lambda_mim: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cl: 1.0,
            lambda_mim: 1.0,
            temperature: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if !(self.lambda_cl >= 0.0 && self.lambda_mim >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

pub fn combined_loss(cl: f64, mim: f64, w: &LossWeights) -> f64 {
    w.lambda_cl * cl + w.lambda_mim * mim
}
