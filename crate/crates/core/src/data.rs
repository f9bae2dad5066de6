//! Count tables, linear constraints on the coefficients, and the projection
//! algebra that the solver, the selection layer and the diagnostics share.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::orthonormal_columns;

/// Read counts `W` (samples × taxa) together with per-sample totals `N_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    counts: DMatrix<u64>,
    row_totals: Vec<u64>,
    sample_ids: Vec<String>,
    taxon_ids: Vec<String>,
}

impl CountMatrix {
    /// Builds a count matrix, computing the row totals.
    pub fn new(counts: DMatrix<u64>, sample_ids: Vec<String>, taxon_ids: Vec<String>) -> Result<Self> {
        let (n, p) = counts.shape();
        if n < 1 {
            return Err(Error::invalid("count matrix needs at least one sample"));
        }
        if p < 2 {
            return Err(Error::invalid("count matrix needs at least two taxa"));
        }
        if sample_ids.len() != n || taxon_ids.len() != p {
            return Err(Error::invalid(format!(
                "label lengths ({} samples, {} taxa) do not match a {n}x{p} table",
                sample_ids.len(),
                taxon_ids.len()
            )));
        }
        let row_totals = (0..n).map(|i| counts.row(i).iter().sum()).collect();
        Ok(Self { counts, row_totals, sample_ids, taxon_ids })
    }

    /// Same as [`CountMatrix::new`] but also checks caller-supplied totals.
    pub fn with_totals(
        counts: DMatrix<u64>,
        row_totals: Vec<u64>,
        sample_ids: Vec<String>,
        taxon_ids: Vec<String>,
    ) -> Result<Self> {
        let m = Self::new(counts, sample_ids, taxon_ids)?;
        if m.row_totals != row_totals {
            let bad = m
                .row_totals
                .iter()
                .zip(&row_totals)
                .position(|(a, b)| a != b)
                .unwrap_or(m.row_totals.len().min(row_totals.len()));
            return Err(Error::invalid(format!("row total mismatch at sample {bad}")));
        }
        Ok(m)
    }

    /// Builds a matrix from row vectors with generated labels `s1..`, `t1..`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("ragged rows"));
        }
        let counts = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        Self::new(counts, default_labels("s", n), default_labels("t", p))
    }

    pub fn nrows(&self) -> usize {
        self.counts.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.counts.ncols()
    }

    pub fn counts(&self) -> &DMatrix<u64> {
        &self.counts
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[(i, j)]
    }

    pub fn row_totals(&self) -> &[u64] {
        &self.row_totals
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn taxon_ids(&self) -> &[String] {
        &self.taxon_ids
    }

    /// Counts as reals, for the general-family corrections and diagnostics.
    pub fn to_f64(&self) -> DMatrix<f64> {
        self.counts.map(|c| c as f64)
    }

    /// Sub-table restricted to the given rows.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let counts = DMatrix::from_fn(rows.len(), self.ncols(), |i, j| self.counts[(rows[i], j)]);
        Self {
            counts,
            row_totals: rows.iter().map(|&i| self.row_totals[i]).collect(),
            sample_ids: rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            taxon_ids: self.taxon_ids.clone(),
        }
    }

    /// Writes the table in the same layout [`load_counts`] reads.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.taxon_ids.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.nrows() {
            let mut rec = vec![self.sample_ids[i].clone()];
            rec.extend(self.counts.row(i).iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn default_labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("{prefix}{k}")).collect()
}

const ID_HEADERS: &[&str] = &["", "sample", "sample_id", "sampleid", "sample id", "id", "#sampleid", "#otu id"];

/// Reads a count table from a CSV file.
///
/// The first row names the taxa. A leading sample-id column is recognised when
/// its header cell is empty or a conventional id name, or when any of its cells
/// is not numeric; otherwise every column is a taxon and samples are labelled
/// `s1, s2, ...`.
pub fn load_counts(path: impl AsRef<Path>) -> Result<CountMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    parse_counts(file, &path.display().to_string())
}

/// Parses a count table from any reader; `source_name` is used in errors.
pub fn parse_counts<R: Read>(reader: R, source_name: &str) -> Result<CountMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = Vec::new();
    for rec in rdr.records() {
        records.push(rec?);
    }
    let parse_err = |line: usize, column: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        column,
        message,
    };
    let header = records
        .first()
        .ok_or_else(|| parse_err(1, 1, "empty file".into()))?
        .clone();
    let body = &records[1..];
    let width = header.len();
    for (k, rec) in body.iter().enumerate() {
        if rec.len() != width {
            return Err(parse_err(
                k + 2,
                rec.len().min(width) + 1,
                format!("ragged row: expected {width} cells, found {}", rec.len()),
            ));
        }
    }
    let first = header.get(0).unwrap_or("").to_ascii_lowercase();
    let has_id_column = ID_HEADERS.contains(&first.as_str())
        || body.iter().any(|r| r.get(0).is_some_and(|c| c.parse::<f64>().is_err()));
    let offset = usize::from(has_id_column);
    let taxon_ids: Vec<String> = header.iter().skip(offset).map(str::to_string).collect();
    if body.is_empty() {
        return Err(parse_err(2, 1, "no sample rows".into()));
    }
    let n = body.len();
    let p = taxon_ids.len();
    let mut counts = DMatrix::<u64>::zeros(n, p);
    let mut sample_ids = Vec::with_capacity(n);
    for (i, rec) in body.iter().enumerate() {
        sample_ids.push(if has_id_column {
            rec.get(0).unwrap_or("").to_string()
        } else {
            format!("s{}", i + 1)
        });
        for j in 0..p {
            let cell = rec.get(j + offset).unwrap_or("");
            let value = cell.parse::<u64>().map_err(|_| {
                let why = match cell.parse::<f64>() {
                    Ok(v) if v < 0.0 => "negative count",
                    Ok(_) => "non-integer count",
                    Err(_) => "not a number",
                };
                parse_err(i + 2, j + offset + 1, format!("{why} {cell:?} (taxon {:?})", taxon_ids[j]))
            })?;
            counts[(i, j)] = value;
        }
    }
    CountMatrix::new(counts, sample_ids, taxon_ids)
}

/// Linear equality constraints `C^T beta = 0` on the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    matrix: DMatrix<f64>,
    basis: DMatrix<f64>,
}

impl ConstraintSpec {
    /// Wraps a `p × r` constraint matrix. Columns must be linearly independent.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.ncols() == 0 {
            return Err(Error::invalid("constraint matrix needs at least one column"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("constraint matrix has non-finite entries"));
        }
        let (basis, dependent) = orthonormal_columns(&matrix);
        if !dependent.is_empty() {
            return Err(Error::RankDeficient(format!(
                "columns {dependent:?} are linearly dependent on earlier columns"
            )));
        }
        Ok(Self { matrix, basis })
    }

    /// The compositional constraint `1_p^T beta = 0`.
    pub fn sum_to_zero(p: usize) -> Self {
        Self::new(DMatrix::from_element(p, 1, 1.0)).expect("a nonzero column has full rank")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Orthonormal basis of `col(C)`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Whether `1_p` lies in `col(C)`, i.e. the fit is invariant to per-row
    /// shifts of the design.
    pub fn contains_ones(&self) -> bool {
        let p = self.dim();
        let ones = DVector::from_element(p, 1.0);
        let resid = &ones - &self.basis * (self.basis.transpose() * &ones);
        resid.norm() <= 1e-10 * (p as f64).sqrt()
    }

    /// `C^T beta` measured against the orthonormal basis, max-abs.
    pub fn violation(&self, beta: &DVector<f64>) -> f64 {
        crate::linalg::inf_norm(&(self.basis.transpose() * beta))
    }

    /// Projects `v` onto the null space of `C^T`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.basis * (self.basis.transpose() * v)
    }
}

/// `I_p - P_C` with `P_C = C (C^T C)^+ C^T`.
pub fn projector_null_space(constraint: &ConstraintSpec) -> DMatrix<f64> {
    let p = constraint.dim();
    let q = constraint.basis();
    let mut m = DMatrix::identity(p, p) - q * q.transpose();
    // exact symmetry
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `design · (I_p - P_C)`: every row projected onto the null space of `C^T`.
pub fn center_design(design: &DMatrix<f64>, constraint: &ConstraintSpec) -> Result<DMatrix<f64>> {
    if design.ncols() != constraint.dim() {
        return Err(Error::invalid(format!(
            "design has {} columns but the constraint is over {} coefficients",
            design.ncols(),
            constraint.dim()
        )));
    }
    let q = constraint.basis();
    Ok(design - (design * q) * q.transpose())
}

/// Design matrix, response and constraint for one regression problem.
#[derive(Debug, Clone)]
pub struct RegressionData {
    design: DMatrix<f64>,
    response: DVector<f64>,
    constraint: ConstraintSpec,
}

impl RegressionData {
    pub fn new(design: DMatrix<f64>, response: DVector<f64>, constraint: ConstraintSpec) -> Result<Self> {
        if design.nrows() != response.len() {
            return Err(Error::invalid(format!(
                "design has {} rows but the response has {} entries",
                design.nrows(),
                response.len()
            )));
        }
        if design.ncols() != constraint.dim() {
            return Err(Error::invalid(format!(
                "design has {} columns but the constraint is over {} coefficients",
                design.ncols(),
                constraint.dim()
            )));
        }
        if design.nrows() == 0 {
            return Err(Error::invalid("no observations"));
        }
        if let Some(k) = design.iter().position(|v| !v.is_finite()) {
            let (i, j) = (k % design.nrows(), k / design.nrows());
            return Err(Error::invalid(format!("non-finite design entry at ({i}, {j})")));
        }
        if let Some(i) = response.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite response entry at {i}")));
        }
        Ok(Self { design, response, constraint })
    }

    /// Convenience constructor with the sum-to-zero constraint.
    pub fn compositional(design: DMatrix<f64>, response: DVector<f64>) -> Result<Self> {
        let p = design.ncols();
        Self::new(design, response, ConstraintSpec::sum_to_zero(p))
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    pub fn constraint(&self) -> &ConstraintSpec {
        &self.constraint
    }

    pub fn centered_design(&self) -> DMatrix<f64> {
        center_design(&self.design, &self.constraint).expect("dimensions checked on construction")
    }

    /// Sub-problem on the given rows (same constraint).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            design: crate::linalg::select_rows(&self.design, rows),
            response: crate::linalg::select_entries(&self.response, rows),
            constraint: self.constraint.clone(),
        }
    }
}
