//! File formats: TOML model files, estimate exports and rollout CSVs.
//!
//! A model file holds
//!
//! ```toml
//! n = 3
//! p = 2
//! T = 2
//! A = [0.6, 0.5, 0.4, 0.0, 0.4, 0.3, 0.0, 0.0, 0.3]   # row-major n x n
//! B = [1.0, 0.5, 0.5, 1.0, 0.5, 0.5]                  # row-major n x p
//! sigma_u2 = 1.0
//! sigma_w2 = 1.0
//! sigma_x2 = 1.0
//! ```
//!
//! For a time-varying model `A` and `B` are arrays of such flat matrices,
//! one per step. Estimate exports add a `[metadata]` table, which model
//! loading ignores.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Estimate, WeightSchedule};
use crate::experiments::format_float;
use crate::numerics::Matrix;
use crate::simulate::{Rollout, Source};
use crate::systems::{Dynamics, SystemModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixField {
    Single(Vec<f64>),
    Sequence(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDoc {
    n: usize,
    p: usize,
    #[serde(rename = "T")]
    horizon: usize,
    #[serde(rename = "A")]
    a: MatrixField,
    #[serde(rename = "B")]
    b: MatrixField,
    sigma_u2: f64,
    sigma_w2: f64,
    sigma_x2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<EstimateMetadata>,
}

/// Provenance stored alongside an exported estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateMetadata {
    pub weights: WeightSchedule,
    /// Resolved `q_k` for `k = 0..T`.
    pub resolved_weights: Vec<f64>,
    pub gram_min_eig: f64,
    pub true_columns: usize,
    pub aux_columns: usize,
    pub ridge_applied: bool,
}

fn flat(rows: usize, cols: usize, data: Vec<f64>, what: &str) -> Result<Matrix> {
    if data.len() != rows * cols {
        return Err(Error::Config(format!(
            "{what} needs {} entries ({rows}x{cols}), got {}",
            rows * cols,
            data.len()
        )));
    }
    Matrix::new(rows, cols, data)
}

fn model_from_doc(doc: ModelDoc) -> Result<SystemModel> {
    let (n, p, t) = (doc.n, doc.p, doc.horizon);
    match (doc.a, doc.b) {
        (MatrixField::Single(a), MatrixField::Single(b)) => SystemModel::time_invariant(
            flat(n, n, a, "A")?,
            flat(n, p, b, "B")?,
            doc.sigma_u2,
            doc.sigma_w2,
            doc.sigma_x2,
            t,
        ),
        (MatrixField::Sequence(a), MatrixField::Sequence(b)) => {
            let a_seq = a
                .into_iter()
                .map(|m| flat(n, n, m, "A_k"))
                .collect::<Result<Vec<_>>>()?;
            let b_seq = b
                .into_iter()
                .map(|m| flat(n, p, m, "B_k"))
                .collect::<Result<Vec<_>>>()?;
            SystemModel::time_varying(a_seq, b_seq, doc.sigma_u2, doc.sigma_w2, doc.sigma_x2, t)
        }
        _ => Err(Error::Config(
            "A and B must both be flat matrices or both be lists".into(),
        )),
    }
}

fn doc_from_model(model: &SystemModel) -> ModelDoc {
    let (a, b) = match model.dynamics() {
        Dynamics::Invariant { a, b } => (
            MatrixField::Single(a.as_slice().to_vec()),
            MatrixField::Single(b.as_slice().to_vec()),
        ),
        Dynamics::Varying { a_seq, b_seq } => (
            MatrixField::Sequence(a_seq.iter().map(|m| m.as_slice().to_vec()).collect()),
            MatrixField::Sequence(b_seq.iter().map(|m| m.as_slice().to_vec()).collect()),
        ),
    };
    ModelDoc {
        n: model.state_dim(),
        p: model.input_dim(),
        horizon: model.horizon(),
        a,
        b,
        sigma_u2: model.sigma_u2,
        sigma_w2: model.sigma_w2,
        sigma_x2: model.sigma_x2,
        metadata: None,
    }
}

pub fn model_from_toml(text: &str) -> Result<SystemModel> {
    let doc: ModelDoc = toml::from_str(text).map_err(|e| Error::Config(format!("model file: {e}")))?;
    model_from_doc(doc)
}

pub fn model_to_toml(model: &SystemModel) -> Result<String> {
    toml::to_string(&doc_from_model(model)).map_err(|e| Error::parse("model file", e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SystemModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_toml(&text)
}

pub fn save_model(model: &SystemModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_toml(model)?).map_err(|e| Error::io(path, e))
}

/// Serializes an estimate as a time-invariant model file plus metadata.
/// The variances are taken from `noise`, which need not match `estimate`.
pub fn estimate_to_toml(
    estimate: &Estimate,
    noise: (f64, f64, f64),
    horizon: usize,
    metadata: EstimateMetadata,
) -> Result<String> {
    let doc = ModelDoc {
        n: estimate.a_hat.rows(),
        p: estimate.b_hat.cols(),
        horizon,
        a: MatrixField::Single(estimate.a_hat.as_slice().to_vec()),
        b: MatrixField::Single(estimate.b_hat.as_slice().to_vec()),
        sigma_u2: noise.0,
        sigma_w2: noise.1,
        sigma_x2: noise.2,
        metadata: Some(metadata),
    };
    toml::to_string(&doc).map_err(|e| Error::parse("estimate file", e))
}

pub fn estimate_metadata_from_toml(text: &str) -> Result<Option<EstimateMetadata>> {
    let doc: ModelDoc = toml::from_str(text).map_err(|e| Error::Config(format!("estimate file: {e}")))?;
    Ok(doc.metadata)
}

fn source_name(s: Source) -> &'static str {
    match s {
        Source::True => "true",
        Source::Auxiliary => "aux",
    }
}

pub fn rollout_csv_header(n: usize, p: usize) -> String {
    let mut h = String::from("system,rollout,k");
    for (prefix, count) in [("x", n), ("u", p), ("w", n)] {
        for i in 1..=count {
            let _ = write!(h, ",{prefix}_{i}");
        }
    }
    h
}

/// One row per `(rollout, k)` with `k = 0..=T`. The final row of each
/// rollout carries `x_T` and leaves the input and noise fields empty.
pub fn render_rollouts(sets: &[(Source, &[Rollout])]) -> Result<String> {
    let first = sets
        .iter()
        .find_map(|(_, r)| r.first())
        .ok_or_else(|| Error::Config("no rollouts to write".into()))?;
    let (n, p) = (first.state_dim(), first.input_dim());
    let mut out = rollout_csv_header(n, p);
    out.push('\n');
    for (source, rollouts) in sets {
        for (i, r) in rollouts.iter().enumerate() {
            if r.state_dim() != n || r.input_dim() != p {
                return Err(Error::Shape("rollouts with mixed dimensions".into()));
            }
            let t = r.horizon();
            for k in 0..=t {
                let _ = write!(out, "{},{i},{k}", source_name(*source));
                for v in r.state(k) {
                    let _ = write!(out, ",{}", format_float(*v));
                }
                if k < t {
                    for v in r.input(k).iter().chain(r.noise(k)) {
                        let _ = write!(out, ",{}", format_float(*v));
                    }
                } else {
                    out.push_str(&",".repeat(p + n));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn save_rollouts(sets: &[(Source, &[Rollout])], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_rollouts(sets)?).map_err(|e| Error::io(path, e))
}

/// Rollouts read back from CSV, grouped by system in rollout order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutSets {
    pub true_rollouts: Vec<Rollout>,
    pub aux_rollouts: Vec<Rollout>,
}

#[derive(Default)]
struct Partial {
    states: Vec<f64>,
    inputs: Vec<f64>,
    noises: Vec<f64>,
    next_k: usize,
    closed: bool,
}

pub fn parse_rollouts(text: &str) -> Result<RolloutSets> {
    const CTX: &str = "rollout csv";
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(CTX, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let count = |prefix: &str| cols.iter().filter(|c| c.starts_with(prefix)).count();
    let (n, p) = (count("x_"), count("u_"));
    if n == 0 || p == 0 || count("w_") != n || header != rollout_csv_header(n, p) {
        return Err(Error::parse(CTX, format!("bad header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(CTX, format!("{s:?}: {e}")));

    let mut groups: BTreeMap<(u8, usize), Partial> = BTreeMap::new();
    for (line_no, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let at = |m: &str| Error::parse(CTX, format!("line {}: {m}", line_no + 2));
        if f.len() != 3 + 2 * n + p {
            return Err(at("wrong field count"));
        }
        let system = match f[0] {
            "true" => 0,
            "aux" => 1,
            other => return Err(at(&format!("unknown system {other:?}"))),
        };
        let rollout: usize = f[1].parse().map_err(|_| at("bad rollout index"))?;
        let k: usize = f[2].parse().map_err(|_| at("bad step index"))?;
        let g = groups.entry((system, rollout)).or_default();
        if g.closed || k != g.next_k {
            return Err(at("steps must be consecutive from 0"));
        }
        for s in &f[3..3 + n] {
            g.states.push(num(s)?);
        }
        let rest = &f[3 + n..];
        if rest.iter().all(|s| s.is_empty()) {
            g.closed = true;
        } else {
            for s in &rest[..p] {
                g.inputs.push(num(s)?);
            }
            for s in &rest[p..] {
                g.noises.push(num(s)?);
            }
        }
        g.next_k += 1;
    }

    let mut sets = RolloutSets::default();
    for ((system, index), g) in groups {
        if !g.closed {
            return Err(Error::parse(CTX, format!("rollout {index} has no final state row")));
        }
        let target = if system == 0 {
            &mut sets.true_rollouts
        } else {
            &mut sets.aux_rollouts
        };
        if index != target.len() {
            return Err(Error::parse(
                CTX,
                format!("rollout indices must be contiguous, missing {}", target.len()),
            ));
        }
        target.push(Rollout::new(n, p, g.states, g.inputs, g.noises)?);
    }
    Ok(sets)
}

pub fn load_rollouts(path: impl AsRef<Path>) -> Result<RolloutSets> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rollouts(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::paper_models;
    use crate::simulate::simulate_rollouts;

    #[test]
    fn paper_model_round_trip() {
        let (t, a) = paper_models();
        for m in [t, a] {
            let text = model_to_toml(&m).unwrap();
            let back = model_from_toml(&text).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn varying_model_round_trip() {
        let (t, a) = paper_models();
        let m = SystemModel::time_varying(
            vec![t.a_at(0).clone(), a.a_at(0).clone()],
            vec![t.b_at(0).clone(), a.b_at(0).clone()],
            0.5,
            0.1,
            0.0,
            2,
        )
        .unwrap();
        let text = model_to_toml(&m).unwrap();
        assert_eq!(model_from_toml(&text).unwrap(), m);
    }

    #[test]
    fn decimal_inputs_are_preserved() {
        let text = "n = 1\np = 1\nT = 3\nA = [0.1]\nB = [0.7]\nsigma_u2 = 0.3\nsigma_w2 = 0.2\nsigma_x2 = 0.0\n";
        let m = model_from_toml(text).unwrap();
        assert_eq!(m.a_at(0).get(0, 0), 0.1);
        assert_eq!(m.sigma_u2, 0.3);
        let again = model_from_toml(&model_to_toml(&m).unwrap()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn malformed_models_are_config_errors() {
        let wrong_len = "n = 2\np = 1\nT = 1\nA = [1.0]\nB = [1.0, 1.0]\nsigma_u2 = 1\nsigma_w2 = 1\nsigma_x2 = 1\n";
        assert!(matches!(model_from_toml(wrong_len), Err(Error::Config(_))));
        let mixed = "n = 1\np = 1\nT = 1\nA = [[1.0]]\nB = [1.0]\nsigma_u2 = 1\nsigma_w2 = 1\nsigma_x2 = 1\n";
        assert!(matches!(model_from_toml(mixed), Err(Error::Config(_))));
        assert!(matches!(model_from_toml("n = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn rollout_csv_round_trip_is_lossless() {
        let (t, a) = paper_models();
        let tr = simulate_rollouts(&t, 4, 11);
        let ar = simulate_rollouts(&a, 3, 12);
        let text = render_rollouts(&[(Source::True, &tr), (Source::Auxiliary, &ar)]).unwrap();
        assert!(text.starts_with("system,rollout,k,x_1,x_2,x_3,u_1,u_2,w_1,w_2,w_3\n"));
        assert_eq!(text.lines().count(), 1 + 7 * 3);
        let back = parse_rollouts(&text).unwrap();
        assert_eq!(back.true_rollouts, tr);
        assert_eq!(back.aux_rollouts, ar);
    }

    #[test]
    fn rollout_csv_rejects_gaps() {
        let (t, _) = paper_models();
        let tr = simulate_rollouts(&t, 1, 1);
        let text = render_rollouts(&[(Source::True, &tr)]).unwrap();
        let gapped: Vec<&str> = text
            .lines()
            .enumerate()
            .filter(|(i, _)| *i != 2)
            .map(|(_, l)| l)
            .collect();
        assert!(parse_rollouts(&gapped.join("\n")).is_err());
        assert!(parse_rollouts("system,rollout,k\n").is_err());
    }
}
