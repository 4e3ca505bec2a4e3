//! Sample CSV ingestion and the on-disk model format.
//!
//! Samples travel as UTF-8 CSV with header `id,t,y,z` plus an optional
//! trailing `sd` column carrying per-observation measurement error
//! standard deviations. When the `sd` column is present every row must
//! fill it; rows may arrive ungrouped and are grouped by id on load, with
//! each curve's rows sorted by time. A curve's covariate must be constant
//! across its rows.
//!
//! Models are stored as a versioned JSON document: a small header wrapping
//! the model payload plus a SHA-256 checksum of the payload's canonical
//! serialization, so `save(load(f))` is byte-identical and tampering is
//! detected on load.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::SplineBasis;
use crate::error::{Error, Result};
use crate::fit::{FitDiagnostics, FittedModel, TrainingMeta};
use crate::model::{FunctionalSample, ModelBases, ModelParams};
use crate::penalty::Lambdas;

/// Read samples from a CSV file.
pub fn read_samples_csv(path: &Path) -> Result<Vec<FunctionalSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let with_sd = match cols.as_slice() {
        ["id", "t", "y", "z"] => false,
        ["id", "t", "y", "z", "sd"] => true,
        other => {
            return Err(Error::data(format!(
                "{}: header must be id,t,y,z[,sd], got {}",
                path.display(),
                other.join(",")
            )))
        }
    };

    struct Partial {
        rows: Vec<(f64, f64, Option<f64>)>,
        covariate: f64,
    }
    let mut order: Vec<String> = Vec::new();
    let mut curves: HashMap<String, Partial> = HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or_default();
        let field = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                Error::data(format!(
                    "{} line {line}: cannot parse {name} value {raw:?}",
                    path.display()
                ))
            })
        };
        let id = record.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::data(format!(
                "{} line {line}: empty id",
                path.display()
            )));
        }
        let t = field(1, "t")?;
        let y = field(2, "y")?;
        let z = field(3, "z")?;
        let sd = if with_sd {
            let v = field(4, "sd")?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::data(format!(
                    "{} line {line}: sd must be positive, got {v}",
                    path.display()
                )));
            }
            Some(v)
        } else {
            None
        };
        if !t.is_finite() || !y.is_finite() || !z.is_finite() {
            return Err(Error::data(format!(
                "{} line {line}: non-finite value",
                path.display()
            )));
        }
        match curves.get_mut(&id) {
            Some(partial) => {
                if partial.covariate != z {
                    return Err(Error::data(format!(
                        "{} line {line}: curve {id} has conflicting covariates {} and {z}",
                        path.display(),
                        partial.covariate
                    )));
                }
                partial.rows.push((t, y, sd));
            }
            None => {
                order.push(id.clone());
                curves.insert(
                    id,
                    Partial {
                        rows: vec![(t, y, sd)],
                        covariate: z,
                    },
                );
            }
        }
    }
    if order.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }

    let mut samples = Vec::with_capacity(order.len());
    for id in order {
        let mut partial = curves.remove(&id).expect("curve recorded");
        partial
            .rows
            .sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
        let times: Vec<f64> = partial.rows.iter().map(|r| r.0).collect();
        let values: Vec<f64> = partial.rows.iter().map(|r| r.1).collect();
        let noise_sd = if with_sd {
            Some(partial.rows.iter().map(|r| r.2.expect("sd parsed")).collect())
        } else {
            None
        };
        let sample = FunctionalSample {
            id,
            times,
            values,
            covariate: partial.covariate,
            noise_sd,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Write samples as CSV. The `sd` column is included exactly when every
/// sample carries measurement errors.
pub fn write_samples_csv(path: &Path, samples: &[FunctionalSample]) -> Result<()> {
    let all_sd = !samples.is_empty() && samples.iter().all(|s| s.noise_sd.is_some());
    let any_sd = samples.iter().any(|s| s.noise_sd.is_some());
    if any_sd && !all_sd {
        return Err(Error::invalid(
            "either every sample or no sample may carry measurement errors",
        ));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if all_sd {
        writeln!(out, "id,t,y,z,sd")?;
    } else {
        writeln!(out, "id,t,y,z")?;
    }
    for s in samples {
        for (i, (&t, &y)) in s.times.iter().zip(&s.values).enumerate() {
            if all_sd {
                let sd = s.noise_sd.as_ref().expect("checked")[i];
                writeln!(out, "{},{},{},{},{}", s.id, t, y, s.covariate, sd)?;
            } else {
                writeln!(out, "{},{},{},{}", s.id, t, y, s.covariate)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

pub const MODEL_FORMAT: &str = "sfpca-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixDef {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatrixDef {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixDef {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::ModelFile(format!(
                "matrix data length {} does not match {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.data[i * self.cols + j]
        }))
    }
}

#[derive(Serialize, Deserialize)]
struct BasisDef {
    degree: usize,
    n_interior: usize,
    domain: [f64; 2],
    orthonormalized: bool,
    transform: Option<MatrixDef>,
}

impl BasisDef {
    fn from_basis(b: &SplineBasis) -> Self {
        BasisDef {
            degree: b.degree(),
            n_interior: b.n_interior(),
            domain: [b.domain().0, b.domain().1],
            orthonormalized: b.is_orthonormalized(),
            transform: b.transform().map(MatrixDef::from_matrix),
        }
    }

    fn to_basis(&self) -> Result<SplineBasis> {
        let transform = self.transform.as_ref().map(|m| m.to_matrix()).transpose()?;
        if self.orthonormalized != transform.is_some() {
            return Err(Error::ModelFile(
                "orthonormalization flag inconsistent with stored transform".into(),
            ));
        }
        SplineBasis::from_parts(
            self.degree,
            self.n_interior,
            (self.domain[0], self.domain[1]),
            transform,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct FactorDef {
    /// Covariance time-basis size.
    m: usize,
    /// Covariance covariate-basis size.
    q: usize,
    rank: usize,
    /// Row-major (m q) x rank coefficients.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DiagnosticsSummary {
    converged: bool,
    outer_iters: usize,
    line_search_failures: usize,
    final_objective: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelPayload {
    mean_t: BasisDef,
    mean_z: BasisDef,
    cov_t: BasisDef,
    cov_z: BasisDef,
    mean_coefs: Vec<f64>,
    factor: FactorDef,
    log_noise_var: f64,
    lambdas: Lambdas,
    meta: TrainingMeta,
    diagnostics: DiagnosticsSummary,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    version: u32,
    /// SHA-256 of the payload's compact JSON serialization.
    checksum: String,
    model: ModelPayload,
}

fn payload_checksum(payload: &ModelPayload) -> Result<String> {
    let compact = serde_json::to_string(payload)
        .map_err(|e| Error::ModelFile(format!("serialize: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(compact.as_bytes());
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn payload_of(model: &FittedModel) -> ModelPayload {
    let gamma = &model.params.factor_coefs;
    let q = model.bases.cov_z.len();
    let mut data = Vec::with_capacity(gamma.nrows() * gamma.ncols());
    for i in 0..gamma.nrows() {
        for j in 0..gamma.ncols() {
            data.push(gamma[(i, j)]);
        }
    }
    ModelPayload {
        mean_t: BasisDef::from_basis(&model.bases.mean_t),
        mean_z: BasisDef::from_basis(&model.bases.mean_z),
        cov_t: BasisDef::from_basis(&model.bases.cov_t),
        cov_z: BasisDef::from_basis(&model.bases.cov_z),
        mean_coefs: model.params.mean_coefs.iter().copied().collect(),
        factor: FactorDef {
            m: gamma.nrows() / q,
            q,
            rank: gamma.ncols(),
            data,
        },
        log_noise_var: model.params.log_noise_var,
        lambdas: model.lambdas,
        meta: model.meta.clone(),
        diagnostics: DiagnosticsSummary {
            converged: model.diagnostics.converged,
            outer_iters: model.diagnostics.outer_iters,
            line_search_failures: model.diagnostics.line_search_failures,
            final_objective: model.diagnostics.final_objective,
        },
    }
}

/// Serialize a model to its on-disk JSON document.
pub fn model_to_string(model: &FittedModel) -> Result<String> {
    let payload = payload_of(model);
    let checksum = payload_checksum(&payload)?;
    let doc = ModelDocument {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        checksum,
        model: payload,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::ModelFile(format!("serialize: {e}")))
}

pub fn save_model(path: &Path, model: &FittedModel) -> Result<()> {
    let text = model_to_string(model)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse and checksum-validate a model document.
pub fn model_from_str(text: &str) -> Result<FittedModel> {
    let doc: ModelDocument =
        serde_json::from_str(text).map_err(|e| Error::ModelFile(format!("parse: {e}")))?;
    if doc.format != MODEL_FORMAT {
        return Err(Error::ModelFile(format!("unknown format {:?}", doc.format)));
    }
    if doc.version != MODEL_VERSION {
        return Err(Error::ModelFile(format!(
            "unsupported version {} (expected {MODEL_VERSION})",
            doc.version
        )));
    }
    let expected = payload_checksum(&doc.model)?;
    if expected != doc.checksum {
        return Err(Error::ModelFile(format!(
            "checksum mismatch: file says {}, content hashes to {expected}",
            doc.checksum
        )));
    }
    let p = doc.model;
    let bases = ModelBases {
        mean_t: p.mean_t.to_basis()?,
        mean_z: p.mean_z.to_basis()?,
        cov_t: p.cov_t.to_basis()?,
        cov_z: p.cov_z.to_basis()?,
    };
    let rows = p.factor.m * p.factor.q;
    if p.factor.data.len() != rows * p.factor.rank {
        return Err(Error::ModelFile("factor data length mismatch".into()));
    }
    if rows != bases.factor_rows() {
        return Err(Error::ModelFile(
            "factor dimensions inconsistent with bases".into(),
        ));
    }
    if p.mean_coefs.len() != bases.mean_dim() {
        return Err(Error::ModelFile(
            "mean coefficient length inconsistent with bases".into(),
        ));
    }
    let factor_coefs = DMatrix::from_fn(rows, p.factor.rank, |i, j| {
        p.factor.data[i * p.factor.rank + j]
    });
    let params = ModelParams {
        mean_coefs: DVector::from_vec(p.mean_coefs),
        factor_coefs,
        log_noise_var: p.log_noise_var,
    };
    Ok(FittedModel {
        params,
        bases,
        lambdas: p.lambdas,
        diagnostics: FitDiagnostics {
            objective_trace: Vec::new(),
            outer_iters: p.diagnostics.outer_iters,
            converged: p.diagnostics.converged,
            line_search_failures: p.diagnostics.line_search_failures,
            final_grad_norms: [0.0; 3],
            final_objective: p.diagnostics.final_objective,
        },
        meta: p.meta,
    })
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit, FitConfig};
    use crate::sim::{generate, SimTruth};

    fn tiny_model() -> FittedModel {
        let truth = SimTruth {
            n_curves: 60,
            m_per_curve: 8,
            seed: 29,
            ..SimTruth::default()
        };
        let samples = generate(&truth);
        let config = FitConfig {
            mean_t_size: 5,
            mean_z_size: 4,
            cov_t_size: 5,
            cov_z_size: 4,
            max_outer: 2,
            max_inner: 10,
            ..FitConfig::defaults(1)
        };
        fit(&samples, &config).unwrap()
    }

    #[test]
    fn model_roundtrip_is_byte_identical_and_checksummed() {
        let model = tiny_model();
        let text = model_to_string(&model).unwrap();
        let loaded = model_from_str(&text).unwrap();
        let again = model_to_string(&loaded).unwrap();
        assert_eq!(text, again);
        assert_eq!(model.params, loaded.params);
        assert_eq!(model.meta, loaded.meta);

        // Tampering breaks the checksum.
        let tampered = text.replace("\"log_noise_var\":", "\"log_noise_var\": 0.123,\"x\":");
        assert!(model_from_str(&tampered).is_err());
    }

    #[test]
    fn csv_roundtrip_and_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        std::fs::write(
            &path,
            "id,t,y,z\nb,0.5,2.0,0.3\na,0.2,1.0,0.1\nb,0.1,0.5,0.3\na,0.9,-1.0,0.1\n",
        )
        .unwrap();
        let samples = read_samples_csv(&path).unwrap();
        // First-appearance order, times sorted inside each curve.
        assert_eq!(samples[0].id, "b");
        assert_eq!(samples[0].times, vec![0.1, 0.5]);
        assert_eq!(samples[0].values, vec![0.5, 2.0]);
        assert_eq!(samples[1].id, "a");
        assert_eq!(samples[1].times, vec![0.2, 0.9]);

        let out = dir.path().join("out.csv");
        write_samples_csv(&out, &samples).unwrap();
        let again = read_samples_csv(&out).unwrap();
        assert_eq!(samples, again);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,t,y,z\na,0.1,1.0,0.5\na,oops,1.0,0.5\n").unwrap();
        match read_samples_csv(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("line 3"), "message: {msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_conflicting_covariates_and_partial_sd() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,t,y,z\na,0.1,1.0,0.5\na,0.2,1.0,0.6\n").unwrap();
        assert!(read_samples_csv(&path).is_err());
        std::fs::write(&path, "id,t,y,z,sd\na,0.1,1.0,0.5,0.1\na,0.2,1.0,0.5,\n").unwrap();
        assert!(read_samples_csv(&path).is_err());
        std::fs::write(&path, "id,t,y,z,sd\na,0.1,1.0,0.5,0.1\na,0.2,1.1,0.5,0.2\n").unwrap();
        let samples = read_samples_csv(&path).unwrap();
        assert_eq!(samples[0].noise_sd, Some(vec![0.1, 0.2]));
    }
}
