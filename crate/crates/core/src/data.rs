//! Longitudinal panel data: subjects observed a ragged number of times, each
//! observation carrying an outcome, `p` covariates and `R` effect modifiers.
//!
//! Modifiers are stored already rescaled to `[0, 1]`; the affine map used to
//! get there lives in [`ModifierScaling`] so new points can be mapped the same
//! way at prediction time.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};

/// Per-modifier min/max used for min-max rescaling onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifierScaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ModifierScaling {
    pub fn identity(r: usize) -> Self {
        ModifierScaling {
            min: vec![0.0; r],
            max: vec![1.0; r],
        }
    }

    /// Fit from raw modifier columns. A constant column keeps `min == max`
    /// and maps every value to 0.5.
    pub fn fit(columns: &[Vec<f64>]) -> Self {
        let mut min = Vec::with_capacity(columns.len());
        let mut max = Vec::with_capacity(columns.len());
        for col in columns {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            min.push(lo);
            max.push(hi);
        }
        ModifierScaling { min, max }
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    pub fn is_constant(&self, v: usize) -> bool {
        !(self.max[v] > self.min[v])
    }

    /// Rescale a raw value of modifier `v`. Returns the value and whether it
    /// had to be clamped into `[0, 1]`.
    pub fn rescale(&self, v: usize, raw: f64) -> (f64, bool) {
        if self.is_constant(v) {
            return (0.5, raw != self.min[v]);
        }
        let s = (raw - self.min[v]) / (self.max[v] - self.min[v]);
        if s < 0.0 {
            (0.0, true)
        } else if s > 1.0 {
            (1.0, true)
        } else {
            (s, false)
        }
    }

    /// Rescale a full raw modifier vector, returning the number of clamped entries.
    pub fn rescale_point(&self, raw: &[f64]) -> (Vec<f64>, usize) {
        let mut clamped = 0;
        let out = raw
            .iter()
            .enumerate()
            .map(|(v, &x)| {
                let (s, c) = self.rescale(v, x);
                clamped += c as usize;
                s
            })
            .collect();
        (out, clamped)
    }

    pub fn unscale(&self, v: usize, s: f64) -> f64 {
        if self.is_constant(v) {
            self.min[v]
        } else {
            self.min[v] + s * (self.max[v] - self.min[v])
        }
    }
}

/// Affine map between the outcome's original units and the standardized
/// scale the sampler works on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScale {
    pub mean: f64,
    pub sd: f64,
}

impl OutcomeScale {
    pub const IDENTITY: OutcomeScale = OutcomeScale { mean: 0.0, sd: 1.0 };

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn unstandardize(&self, y: f64) -> f64 {
        self.mean + self.sd * y
    }

    /// Coefficient functions transform differently: the intercept picks up
    /// the mean shift, slopes only the scale.
    pub fn unstandardize_beta(&self, j: usize, b: f64) -> f64 {
        if j == 0 {
            self.mean + self.sd * b
        } else {
            self.sd * b
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub outcome: String,
    pub covariates: Vec<String>,
    pub modifiers: Vec<String>,
}

impl ColumnNames {
    pub fn generic(p: usize, r: usize) -> Self {
        ColumnNames {
            outcome: "y".into(),
            covariates: (1..=p).map(|j| format!("x{j}")).collect(),
            modifiers: (1..=r).map(|v| format!("z{v}")).collect(),
        }
    }

    /// Name of coefficient function `j`; `j = 0` is the intercept.
    pub fn coefficient(&self, j: usize) -> String {
        if j == 0 {
            "intercept".into()
        } else {
            self.covariates[j - 1].clone()
        }
    }
}

/// Subjects × time observations of `(y, x, z)`, ragged in time.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    subject_ids: Vec<String>,
    offsets: Vec<usize>,
    y: Vec<f64>,
    // column-major covariates: x[j][row]
    x: Vec<Vec<f64>>,
    // row-major rescaled modifiers
    z: Vec<f64>,
    r: usize,
    pub scaling: ModifierScaling,
    pub names: ColumnNames,
}

impl PanelDataset {
    /// Assemble from flat row-major arrays. `sizes[i]` is the number of rows of
    /// subject `i`; rows of a subject are contiguous. Modifiers must already be
    /// rescaled to `[0, 1]`.
    pub fn from_rows(
        subject_ids: Vec<String>,
        sizes: &[usize],
        y: Vec<f64>,
        x_rows: &[f64],
        z_rows: Vec<f64>,
        scaling: ModifierScaling,
        names: ColumnNames,
    ) -> Result<Self> {
        let n_obs = y.len();
        let p = names.covariates.len();
        let r = names.modifiers.len();
        if subject_ids.len() != sizes.len() {
            return Err(data_err("subject id count does not match block count"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(data_err("empty subject block"));
        }
        if sizes.iter().sum::<usize>() != n_obs {
            return Err(data_err("subject block sizes do not sum to row count"));
        }
        if x_rows.len() != n_obs * p {
            return Err(data_err(format!("expected {} covariate cells, got {}", n_obs * p, x_rows.len())));
        }
        if z_rows.len() != n_obs * r {
            return Err(data_err(format!("expected {} modifier cells, got {}", n_obs * r, z_rows.len())));
        }
        if r == 0 {
            return Err(data_err("at least one effect modifier is required"));
        }
        if scaling.len() != r {
            return Err(data_err("modifier scaling has wrong length"));
        }
        if y.iter().chain(x_rows).any(|v| !v.is_finite()) {
            return Err(data_err("non-finite outcome or covariate value"));
        }
        if z_rows.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(data_err("modifier outside [0, 1] after rescaling"));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let x = (0..p)
            .map(|j| (0..n_obs).map(|i| x_rows[i * p + j]).collect())
            .collect();
        Ok(PanelDataset {
            subject_ids,
            offsets,
            y,
            x,
            z: z_rows,
            r,
            scaling,
            names,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.len()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn subject_rows(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn subject_sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn set_outcomes(&mut self, y: Vec<f64>) {
        assert_eq!(y.len(), self.y.len());
        self.y = y;
    }

    /// Covariate column `j` in `1..=p` (1-based so that `j` lines up with the
    /// coefficient index; the intercept has no stored column).
    pub fn covariate(&self, j: usize) -> &[f64] {
        &self.x[j - 1]
    }

    pub fn covariate_row(&self, row: usize) -> Vec<f64> {
        self.x.iter().map(|c| c[row]).collect()
    }

    pub fn modifiers(&self, row: usize) -> &[f64] {
        &self.z[row * self.r..(row + 1) * self.r]
    }

    pub fn modifier_rows(&self) -> &[f64] {
        &self.z
    }

    pub fn outcome_scale(&self) -> OutcomeScale {
        let n = self.y.len() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        let var = if self.y.len() > 1 {
            self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let sd = var.sqrt();
        OutcomeScale {
            mean,
            sd: if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 },
        }
    }

    /// Copy with the outcome mapped through `scale`.
    pub fn with_outcome_scale(&self, scale: &OutcomeScale) -> PanelDataset {
        let mut out = self.clone();
        out.y = self.y.iter().map(|&v| scale.standardize(v)).collect();
        out
    }

    /// Keep only the listed subjects, in the order given.
    pub fn subset(&self, subjects: &[usize]) -> PanelDataset {
        let p = self.p();
        let mut ids = Vec::with_capacity(subjects.len());
        let mut offsets = vec![0];
        let mut y = Vec::new();
        let mut x = vec![Vec::new(); p];
        let mut z = Vec::new();
        for &i in subjects {
            ids.push(self.subject_ids[i].clone());
            for row in self.subject_rows(i) {
                y.push(self.y[row]);
                for (j, col) in x.iter_mut().enumerate() {
                    col.push(self.x[j][row]);
                }
                z.extend_from_slice(self.modifiers(row));
            }
            offsets.push(y.len());
        }
        PanelDataset {
            subject_ids: ids,
            offsets,
            y,
            x,
            z,
            r: self.r,
            scaling: self.scaling.clone(),
            names: self.names.clone(),
        }
    }

    /// Content fingerprint used to tie archives to the data they were fit on.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in &self.subject_ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        for o in &self.offsets {
            h.update((*o as u64).to_le_bytes());
        }
        for v in self.y.iter().chain(self.x.iter().flatten()).chain(&self.z) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
