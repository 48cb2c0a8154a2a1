//! Panel data model: the low-rank factor model that generates donor and
//! experimental-unit outcomes, synthetic and semi-synthetic outcome sources,
//! and CSV ingestion of real panels.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SctsError};
use crate::linalg::truncated_svd;
use crate::seed::{derive_seed, rng_from_seed, Rng};

/// Minimum `sigma_r / sigma_1` accepted as "rank r".
pub const RANK_TOL: f64 = 1e-10;

/// Ground-truth parameters of a synthetic instance.
#[derive(Debug, Clone)]
pub struct FactorModelSpec {
    pub n: usize,
    pub r: usize,
    pub t0: usize,
    pub t: usize,
    pub sigma: f64,
    pub tau_star: f64,
    /// n x r, row i is the donor loading vector.
    pub loadings: DMatrix<f64>,
    /// (t0 + t) x r, row s is the common factor vector of epoch s.
    pub factors: DMatrix<f64>,
    /// Loadings of the experimental unit.
    pub lambda_star: DVector<f64>,
}

impl FactorModelSpec {
    pub fn new(
        loadings: DMatrix<f64>,
        factors: DMatrix<f64>,
        lambda_star: DVector<f64>,
        t0: usize,
        sigma: f64,
        tau_star: f64,
    ) -> Result<Self> {
        let (n, r) = loadings.shape();
        let epochs = factors.nrows();
        if epochs < t0 + 1 {
            return Err(SctsError::Dimension(format!(
                "factor matrix has {epochs} rows, need at least t0 + 1 = {}",
                t0 + 1
            )));
        }
        let spec = Self {
            n,
            r,
            t0,
            t: epochs - t0,
            sigma,
            tau_star,
            loadings,
            factors,
            lambda_star,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Instance with Λ, Z̄ and λ* drawn i.i.d. N(0, 1) from `seed`.
    pub fn gaussian(
        n: usize,
        r: usize,
        t0: usize,
        t: usize,
        sigma: f64,
        tau_star: f64,
        seed: u64,
    ) -> Result<Self> {
        if r == 0 || n < r || t == 0 {
            return Err(SctsError::Dimension(format!(
                "need r >= 1, n >= r, t >= 1 (got n={n}, r={r}, t={t})"
            )));
        }
        let mut rng = rng_from_seed(derive_seed(seed, &["factors".into()]));
        let mut draw = |rows: usize, cols: usize| {
            DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let loadings = draw(n, r);
        let factors = draw(t0 + t, r);
        let lambda_star = draw(r, 1).column(0).into_owned();
        Self::new(loadings, factors, lambda_star, t0, sigma, tau_star)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SctsError::Dimension(m));
        if self.r == 0 {
            return bad("rank r must be at least 1".into());
        }
        if self.n < self.r {
            return bad(format!("need n >= r (n={}, r={})", self.n, self.r));
        }
        if self.t == 0 {
            return bad("need at least one treatment epoch".into());
        }
        if self.loadings.shape() != (self.n, self.r) {
            return bad(format!("loadings must be {}x{}", self.n, self.r));
        }
        if self.factors.shape() != (self.t0 + self.t, self.r) {
            return bad(format!("factors must be {}x{}", self.t0 + self.t, self.r));
        }
        if self.lambda_star.len() != self.r {
            return bad(format!("lambda_star must have length {}", self.r));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and non-negative, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.t0 + self.t
    }

    /// Noiseless donor panel Λ Z̄ᵀ (n x epochs).
    pub fn mean_donor_panel(&self) -> DMatrix<f64> {
        &self.loadings * self.factors.transpose()
    }

    /// Noiseless experimental-unit baseline ⟨λ*, z̄_s⟩ for every epoch.
    pub fn mean_unit_baseline(&self) -> DVector<f64> {
        &self.factors * &self.lambda_star
    }

    /// The canonical representation of this instance (Λ = √n Ū, Z̄ = V̄Σ̄/√n)
    /// together with the experimental-unit loadings expressed in it.
    pub fn canonical(&self) -> Result<CanonicalModel> {
        let (loadings, factors) = canonicalize_decomposition(&self.mean_donor_panel(), self.r)?;
        // λ*_c solves Z̄_c λ = Z̄ λ*; the column spaces agree so this is exact.
        let target = self.mean_unit_baseline();
        let lambda_star = crate::linalg::lstsq(&factors, &target);
        Ok(CanonicalModel {
            loadings,
            factors,
            lambda_star,
        })
    }
}

/// Rotation-fixed decomposition of a rank-r mean panel.
#[derive(Debug, Clone)]
pub struct CanonicalModel {
    pub loadings: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    pub lambda_star: DVector<f64>,
}

impl CanonicalModel {
    /// max_s ‖z̄_s‖, the context-norm bound B.
    pub fn factor_norm_bound(&self) -> f64 {
        max_row_norm(&self.factors)
    }
}

pub fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

/// Canonical factorization of a rank-`r` panel: `Λ = √n Ū`, `Z̄ = V̄Σ̄/√n`.
pub fn canonicalize_decomposition(
    mean_panel: &DMatrix<f64>,
    r: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, epochs) = mean_panel.shape();
    if r == 0 || r > n.min(epochs) {
        return Err(SctsError::Dimension(format!(
            "rank {r} impossible for a {n}x{epochs} panel"
        )));
    }
    let svd = truncated_svd(mean_panel, r);
    let s1 = svd.singular_values[0];
    let ratio = if s1 > 0.0 {
        svd.singular_values[r - 1] / s1
    } else {
        0.0
    };
    if !(ratio > RANK_TOL) {
        return Err(SctsError::RankDeficient {
            requested: r,
            ratio,
        });
    }
    let sqrt_n = (n as f64).sqrt();
    let loadings = svd.u * sqrt_n;
    let factors = svd.v * DMatrix::from_diagonal(&svd.singular_values) / sqrt_n;
    Ok((loadings, factors))
}

/// Binary action.
pub type Action = u8;

/// One epoch of newly observed outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochObservation {
    pub donor_row: Vec<f64>,
    pub unit_value: f64,
}

/// Observation panel plus action history. Epoch `k` (0-based) is
/// pre-treatment when `k < t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    n: usize,
    t0: usize,
    /// Column-major n x epochs donor observations.
    donors: Vec<f64>,
    unit: Vec<f64>,
    actions: Vec<Action>,
}

impl PanelData {
    pub fn new(n: usize, t0: usize) -> Self {
        Self {
            n,
            t0,
            donors: Vec::new(),
            unit: Vec::new(),
            actions: Vec::new(),
        }
    }

    /// Builds a panel from complete arrays, validating every invariant.
    pub fn from_parts(
        donors: &DMatrix<f64>,
        unit: Vec<f64>,
        actions: Vec<Action>,
        t0: usize,
    ) -> Result<Self> {
        let (n, epochs) = donors.shape();
        if unit.len() != epochs || actions.len() != epochs {
            return Err(SctsError::Dimension(format!(
                "donors have {epochs} epochs, unit has {}, actions have {}",
                unit.len(),
                actions.len()
            )));
        }
        let mut panel = Self::new(n, t0);
        for k in 0..epochs {
            panel.push(
                EpochObservation {
                    donor_row: donors.column(k).iter().copied().collect(),
                    unit_value: unit[k],
                },
                actions[k],
            )?;
        }
        Ok(panel)
    }

    pub fn push(&mut self, obs: EpochObservation, action: Action) -> Result<()> {
        if obs.donor_row.len() != self.n {
            return Err(SctsError::Dimension(format!(
                "donor row has {} entries, panel has {} donors",
                obs.donor_row.len(),
                self.n
            )));
        }
        if action > 1 {
            return Err(SctsError::Data(format!("action must be 0 or 1, got {action}")));
        }
        if self.epochs() < self.t0 && action != 0 {
            return Err(SctsError::Data(
                "actions in pre-treatment epochs must be 0".into(),
            ));
        }
        self.donors.extend_from_slice(&obs.donor_row);
        self.unit.push(obs.unit_value);
        self.actions.push(action);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn epochs(&self) -> usize {
        self.unit.len()
    }

    /// Treatment epochs observed so far.
    pub fn treatment_epochs(&self) -> usize {
        self.epochs().saturating_sub(self.t0)
    }

    pub fn unit(&self) -> &[f64] {
        &self.unit
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn donor_column(&self, k: usize) -> &[f64] {
        &self.donors[k * self.n..(k + 1) * self.n]
    }

    /// Donor observations over the first `epochs` epochs as an n x epochs matrix.
    pub fn donor_matrix(&self, epochs: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, epochs, &self.donors[..epochs * self.n])
    }

    pub fn donor_pre(&self) -> DMatrix<f64> {
        self.donor_matrix(self.t0.min(self.epochs()))
    }

    pub fn unit_pre(&self) -> &[f64] {
        &self.unit[..self.t0.min(self.epochs())]
    }

    pub fn unit_treatment(&self) -> &[f64] {
        &self.unit[self.t0.min(self.epochs())..]
    }

    pub fn actions_treatment(&self) -> &[Action] {
        &self.actions[self.t0.min(self.epochs())..]
    }

    /// Treatment epochs (1-based) with a_t = 1.
    pub fn treated_set(&self) -> Vec<usize> {
        self.actions_treatment()
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == 1)
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Copy of this panel with the experimental-unit outcomes replaced.
    pub fn with_unit(&self, unit: Vec<f64>) -> Result<Self> {
        if unit.len() != self.unit.len() {
            return Err(SctsError::Dimension("unit length mismatch".into()));
        }
        let mut out = self.clone();
        out.unit = unit;
        Ok(out)
    }
}

/// A stream of epochs that reacts to the chosen action.
pub trait OutcomeSource {
    fn n_donors(&self) -> usize;
    fn t0(&self) -> usize;
    /// Number of treatment epochs available.
    fn horizon(&self) -> usize;
    /// Ground-truth effect when known.
    fn tau_star(&self) -> Option<f64>;
    /// Emits the next epoch's observations given that epoch's action.
    fn next_epoch(&mut self, action: Action) -> Result<EpochObservation>;
}

/// Outcome source for a synthetic factor-model instance.
///
/// Noise is one stream per instance, drawn per epoch as ε⁰ then ε¹..εⁿ,
/// independently of the action taken.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    spec: FactorModelSpec,
    noise: Rng,
    epoch: usize,
}

impl SyntheticGenerator {
    pub fn spec(&self) -> &FactorModelSpec {
        &self.spec
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Wraps a validated spec into a deterministic outcome source.
pub fn generate_instance(
    spec: FactorModelSpec,
    seed: u64,
) -> Result<(SyntheticGenerator, FactorModelSpec)> {
    spec.validate()?;
    let generator = SyntheticGenerator {
        spec: spec.clone(),
        noise: rng_from_seed(derive_seed(seed, &["noise".into()])),
        epoch: 0,
    };
    Ok((generator, spec))
}

impl OutcomeSource for SyntheticGenerator {
    fn n_donors(&self) -> usize {
        self.spec.n
    }

    fn t0(&self) -> usize {
        self.spec.t0
    }

    fn horizon(&self) -> usize {
        self.spec.t
    }

    fn tau_star(&self) -> Option<f64> {
        Some(self.spec.tau_star)
    }

    fn next_epoch(&mut self, action: Action) -> Result<EpochObservation> {
        let k = self.epoch;
        if k >= self.spec.epochs() {
            return Err(SctsError::Data(format!(
                "generator exhausted after {} epochs",
                self.spec.epochs()
            )));
        }
        if k < self.spec.t0 && action != 0 {
            return Err(SctsError::Data(
                "actions in pre-treatment epochs must be 0".into(),
            ));
        }
        let sigma = self.spec.sigma;
        let z = self.spec.factors.row(k);
        let eps0: f64 = self.noise.sample::<f64, _>(StandardNormal) * sigma;
        let baseline = z.dot(&self.spec.lambda_star.transpose()) + eps0;
        let donor_row = (0..self.spec.n)
            .map(|i| {
                let e: f64 = self.noise.sample::<f64, _>(StandardNormal) * sigma;
                self.spec.loadings.row(i).dot(&z) + e
            })
            .collect();
        self.epoch += 1;
        Ok(EpochObservation {
            donor_row,
            unit_value: baseline + self.spec.tau_star * f64::from(action),
        })
    }
}

/// Outcome source built from a real observation matrix: one row is the
/// experimental unit, the rest are donors.
#[derive(Debug, Clone)]
pub struct SemiSyntheticGenerator {
    donors: DMatrix<f64>,
    unit: Vec<f64>,
    tau_star: f64,
    t0: usize,
    epoch: usize,
}

pub fn make_semi_synthetic(
    observations: &DMatrix<f64>,
    unit_index: usize,
    tau_star: f64,
    t0: usize,
) -> Result<SemiSyntheticGenerator> {
    let (rows, cols) = observations.shape();
    if unit_index >= rows {
        return Err(SctsError::IndexOutOfRange {
            index: unit_index,
            rows,
        });
    }
    if rows < 2 {
        return Err(SctsError::Dimension("need at least one donor row".into()));
    }
    if t0 >= cols {
        return Err(SctsError::Dimension(format!(
            "t0 = {t0} leaves no treatment epochs in a panel with {cols} epochs"
        )));
    }
    Ok(SemiSyntheticGenerator {
        donors: observations.clone().remove_row(unit_index),
        unit: observations.row(unit_index).iter().copied().collect(),
        tau_star,
        t0,
        epoch: 0,
    })
}

impl OutcomeSource for SemiSyntheticGenerator {
    fn n_donors(&self) -> usize {
        self.donors.nrows()
    }

    fn t0(&self) -> usize {
        self.t0
    }

    fn horizon(&self) -> usize {
        self.unit.len() - self.t0
    }

    fn tau_star(&self) -> Option<f64> {
        Some(self.tau_star)
    }

    fn next_epoch(&mut self, action: Action) -> Result<EpochObservation> {
        let k = self.epoch;
        if k >= self.unit.len() {
            return Err(SctsError::Data("panel exhausted".into()));
        }
        if k < self.t0 && action != 0 {
            return Err(SctsError::Data(
                "actions in pre-treatment epochs must be 0".into(),
            ));
        }
        self.epoch += 1;
        Ok(EpochObservation {
            donor_row: self.donors.column(k).iter().copied().collect(),
            unit_value: self.unit[k] + self.tau_star * f64::from(action),
        })
    }
}

/// Mean squared error of `observations` against its best rank-`r`
/// approximation; the noise-variance estimate for real panels.
pub fn rank_r_residual_variance(observations: &DMatrix<f64>, r: usize) -> f64 {
    let svd = truncated_svd(observations, r);
    let approx = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * svd.v.transpose();
    let resid = observations - approx;
    resid.norm_squared() / (observations.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    #[default]
    UnitsByEpochs,
    EpochsByUnits,
}

/// How a panel CSV is laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelLayout {
    pub orientation: Orientation,
    pub delimiter: char,
    pub has_header: bool,
    /// First column (units-by-epochs) or first header cell/column
    /// (epochs-by-units) carries labels rather than values.
    pub id_column: bool,
    #[serde(rename = "T0", alias = "t0")]
    pub t0: usize,
}

impl Default for PanelLayout {
    fn default() -> Self {
        Self {
            orientation: Orientation::UnitsByEpochs,
            delimiter: ',',
            has_header: false,
            id_column: false,
            t0: 0,
        }
    }
}

impl PanelLayout {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SctsError::Config(format!("layout config: {e}")))
    }
}

/// Reads a rectangular numeric panel. Returns the units x epochs matrix and
/// one id per unit. Missing or non-finite cells are errors.
pub fn ingest_panel_csv(
    path: impl AsRef<Path>,
    layout: &PanelLayout,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let file = std::fs::File::open(path.as_ref())?;
    ingest_panel_reader(file, layout)
}

pub fn ingest_panel_reader<R: std::io::Read>(
    reader: R,
    layout: &PanelLayout,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    if !layout.delimiter.is_ascii() {
        return Err(SctsError::Config("delimiter must be ASCII".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(layout.delimiter as u8)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut header: Option<Vec<String>> = None;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| SctsError::IngestFile(e.to_string()))?;
        if line == 0 && layout.has_header {
            header = Some(record.iter().map(str::to_owned).collect());
            continue;
        }
        if record.len() == 1 && record.get(0).is_some_and(str::is_empty) {
            continue;
        }
        let skip = usize::from(layout.id_column);
        if let Some(w) = width {
            if record.len() != w {
                return Err(SctsError::Ingest {
                    row: line,
                    column: record.len().min(w),
                    message: format!("ragged row: expected {w} fields, found {}", record.len()),
                });
            }
        } else {
            width = Some(record.len());
        }
        if record.len() <= skip {
            return Err(SctsError::Ingest {
                row: line,
                column: 0,
                message: "row has no numeric cells".into(),
            });
        }
        if layout.id_column {
            labels.push(record[0].to_owned());
        }
        let mut values = Vec::with_capacity(record.len() - skip);
        for (col, cell) in record.iter().enumerate().skip(skip) {
            let v: f64 = cell.parse().map_err(|_| SctsError::Ingest {
                row: line,
                column: col,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(SctsError::Ingest {
                    row: line,
                    column: col,
                    message: format!("missing or non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(SctsError::IngestFile("empty panel file".into()));
    }
    let nrows = rows.len();
    let ncols = rows[0].len();
    let table = DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    let skip = usize::from(layout.id_column);
    match layout.orientation {
        Orientation::UnitsByEpochs => {
            let ids = if layout.id_column {
                labels
            } else {
                (0..nrows).map(|i| i.to_string()).collect()
            };
            Ok((table, ids))
        }
        Orientation::EpochsByUnits => {
            let ids = match header {
                Some(h) if h.len() == ncols + skip => h.into_iter().skip(skip).collect(),
                _ => (0..ncols).map(|i| i.to_string()).collect(),
            };
            Ok((table.transpose(), ids))
        }
    }
}
