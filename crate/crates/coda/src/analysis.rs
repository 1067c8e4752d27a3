//! Pairwise Jensen-Shannon divergences between attention heads, per-layer
//! heatmap matrices, corpus-level averages, and parameter-count audits.
//! Natural-log base throughout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attention::{AttentionState, ChainTag};
use crate::model::{expected_param_count, ModelConfig, ModelParams, VariantKind};
use crate::tensor::Tensor;
use crate::training::Batch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowMode {
    /// Sum the per-row divergences over query rows (the formula as stated).
    Sum,
    /// Divide by the number of valid rows.
    Mean,
}

impl RowMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(RowMode::Sum),
            "mean" => Ok(RowMode::Mean),
            other => Err(Error::Config(format!("unknown row mode '{other}'"))),
        }
    }
}

/// `h x h` symmetric nonnegative matrix of pairwise head divergences for one
/// attention block.
#[derive(Debug, Clone)]
pub struct JsdMatrix {
    pub chain: ChainTag,
    pub layer: usize,
    pub heads: usize,
    pub row_mode: RowMode,
    /// Row-major `heads x heads`.
    pub values: Vec<f64>,
}

impl JsdMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.heads + j]
    }

    /// Mean of the upper off-diagonal triangle.
    pub fn mean_off_diagonal(&self) -> f64 {
        let h = self.heads;
        if h < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..h {
            for j in i + 1..h {
                total += self.get(i, j);
            }
        }
        total / (h * (h - 1) / 2) as f64
    }
}

#[derive(Debug, Clone)]
pub struct DiversityReport {
    pub matrices: Vec<JsdMatrix>,
    /// Mean over all head pairs of all blocks.
    pub avg_jsd: f64,
    pub sample_count: usize,
}

fn kl(p: &[f64], m: &[f64]) -> f64 {
    // 0 * log(0/x) = 0; m >= p/2 wherever p > 0, so log(p/m) is finite.
    p.iter()
        .zip(m)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &mv)| pv * (pv / mv).ln())
        .sum()
}

/// Row-summed (or row-averaged) Jensen-Shannon divergence between two heads
/// `[n,m]`. Rows flagged invalid in `row_valid` are excluded.
pub fn jsd_pair(
    a: &Tensor,
    b: &Tensor,
    row_valid: Option<&[bool]>,
    mode: RowMode,
) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Shape {
            op: "jsd_pair",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let m = a.shape()[1];
    let mut total = 0.0;
    let mut rows = 0usize;
    for (ri, (pa, pb)) in a.data().chunks(m).zip(b.data().chunks(m)).enumerate() {
        if let Some(valid) = row_valid {
            if !valid[ri] {
                continue;
            }
        }
        for row in [pa, pb] {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::Data(format!(
                    "head row {ri} sums to {s}, not a probability vector"
                )));
            }
        }
        let mid: Vec<f64> = pa.iter().zip(pb).map(|(&x, &y)| 0.5 * (x + y)).collect();
        total += 0.5 * (kl(pa, &mid) + kl(pb, &mid));
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("no valid query rows".into()));
    }
    Ok(match mode {
        RowMode::Sum => total,
        RowMode::Mean => total / rows as f64,
    })
}

/// Extracts head `i` of batch element `bi` from a `[b,h,n,m]` head tensor.
fn head_slice(heads: &Tensor, bi: usize, i: usize) -> Tensor {
    let [_, h, n, m] = [heads.shape()[0], heads.shape()[1], heads.shape()[2], heads.shape()[3]];
    let stride = n * m;
    let off = (bi * h + i) * stride;
    Tensor::new(vec![n, m], heads.data()[off..off + stride].to_vec()).unwrap()
}

/// Entry (i,j) is the mean over all samples (batch elements of all traces)
/// of `jsd_pair(head i, head j)`.
pub fn jsd_heatmap(states: &[&AttentionState], mode: RowMode) -> Result<JsdMatrix> {
    let first = states.first().ok_or_else(|| Error::Data("empty trace set".into()))?;
    let h = first.heads.shape()[1];
    let mut values = vec![0.0; h * h];
    let mut samples = 0usize;
    for state in states {
        let b = state.heads.shape()[0];
        let n = state.heads.shape()[2];
        for bi in 0..b {
            let row_valid = &state.query_valid[bi * n..(bi + 1) * n];
            let heads: Vec<Tensor> = (0..h).map(|i| head_slice(&state.heads, bi, i)).collect();
            for i in 0..h {
                for j in i + 1..h {
                    let v = jsd_pair(&heads[i], &heads[j], Some(row_valid), mode)?;
                    values[i * h + j] += v;
                    values[j * h + i] += v;
                }
            }
            samples += 1;
        }
    }
    for v in values.iter_mut() {
        *v /= samples as f64;
    }
    Ok(JsdMatrix {
        chain: first.chain,
        layer: first.layer,
        heads: h,
        row_mode: mode,
        values,
    })
}

/// Evaluates the model at zero noise over `batches` and aggregates JSD
/// matrices for every block of every chain.
pub fn avg_jsd_report(
    cfg: &ModelConfig,
    params: &ModelParams,
    batches: &[Batch],
    mode: RowMode,
) -> Result<DiversityReport> {
    if batches.is_empty() {
        return Err(Error::Data("empty evaluation dataset".into()));
    }
    let mut by_block: BTreeMap<(ChainTag, usize), Vec<AttentionState>> = BTreeMap::new();
    let mut samples = 0usize;
    for batch in batches {
        let trace = match batch {
            Batch::Lm { tokens, .. } => crate::model::forward_lm(cfg, params, tokens, None)?,
            Batch::Seq2Seq { src, tgt_in, .. } => {
                crate::model::forward_seq2seq(cfg, params, src, tgt_in, None)?
            }
        };
        samples += trace.states.first().map_or(0, |s| s.heads.shape()[0]);
        for state in trace.states {
            by_block.entry((state.chain, state.layer)).or_default().push(state);
        }
    }
    let mut matrices = Vec::new();
    for states in by_block.values() {
        let refs: Vec<&AttentionState> = states.iter().collect();
        matrices.push(jsd_heatmap(&refs, mode)?);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for mat in &matrices {
        let h = mat.heads;
        for i in 0..h {
            for j in i + 1..h {
                total += mat.get(i, j);
                pairs += 1;
            }
        }
    }
    let avg_jsd = if pairs == 0 { 0.0 } else { total / pairs as f64 };
    Ok(DiversityReport { matrices, avg_jsd, sample_count: samples })
}

/// Parameter-count breakdown from the analytic shape formulas.
#[derive(Debug, Clone)]
pub struct ParamAudit {
    pub total: usize,
    pub per_component: Vec<(String, usize)>,
    pub cascade_overhead: usize,
}

/// Cascade overhead formula: (L-1) blocks per chain, each `2*alpha*h^2 +
/// alpha*h + h` scalars.
pub fn cascade_overhead(cfg: &ModelConfig) -> usize {
    if cfg.variant != VariantKind::Coda {
        return 0;
    }
    let h = cfg.heads;
    let per_block = 2 * cfg.alpha * h * h + cfg.alpha * h + h;
    cfg.chains().len() * (cfg.layers - 1) * per_block
}

pub fn param_audit(cfg: &ModelConfig) -> Result<ParamAudit> {
    cfg.validate()?;
    let mut per_component: BTreeMap<String, usize> = BTreeMap::new();
    let mut rng = {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(0)
    };
    let params = ModelParams::init(cfg, &mut rng)?;
    for (name, t) in params.iter() {
        let component = name.split('.').next().unwrap_or(name).to_string();
        *per_component.entry(component).or_default() += t.len();
    }
    Ok(ParamAudit {
        total: expected_param_count(cfg),
        per_component: per_component.into_iter().collect(),
        cascade_overhead: cascade_overhead(cfg),
    })
}

fn fmt_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.8}");
    }
    let decimals = (8 - v.abs().log10().floor() as i64).clamp(0, 17) as usize;
    format!("{v:.decimals$}")
}

/// One CSV per block: `h` rows of `h` comma-separated values, named
/// `jsd_<chain>_layer<k>.csv`.
pub fn write_heatmap_csv(dir: &Path, mat: &JsdMatrix) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("jsd_{}_layer{}.csv", mat.chain.name(), mat.layer));
    let mut out = String::new();
    for row in mat.values.chunks(mat.heads) {
        let line: Vec<String> = row.iter().map(|&v| fmt_sig9(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(&path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(path)
}

/// Structured-text summary: scalar average, per-block means, sample count
/// and config hash.
pub fn write_report_summary(
    dir: &Path,
    report: &DiversityReport,
    config_hash: u64,
) -> Result<std::path::PathBuf> {
    let path = dir.join("jsd_report.txt");
    let mut out = String::new();
    out.push_str(&format!("avg_jsd = {}\n", fmt_sig9(report.avg_jsd)));
    out.push_str(&format!("sample_count = {}\n", report.sample_count));
    out.push_str(&format!("config_hash = {config_hash:016x}\n"));
    for mat in &report.matrices {
        out.push_str(&format!(
            "block {} layer {} mean_jsd = {}\n",
            mat.chain.name(),
            mat.layer,
            fmt_sig9(mat.mean_off_diagonal())
        ));
    }
    fs::write(&path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(path)
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn dist_rows(n: usize, m: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(1e-6f64..1.0, n * m).prop_map(move |raw| {
            let mut data = Vec::with_capacity(n * m);
            for row in raw.chunks(m) {
                let s: f64 = row.iter().sum();
                data.extend(row.iter().map(|v| v / s));
            }
            Tensor::new(vec![n, m], data).unwrap()
        })
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded(
            (a, b) in (dist_rows(3, 5), dist_rows(3, 5))
        ) {
            let ab = jsd_pair(&a, &b, None, RowMode::Sum).unwrap();
            let ba = jsd_pair(&b, &a, None, RowMode::Sum).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= -1e-12);
            prop_assert!(ab <= 3.0 * std::f64::consts::LN_2 + 1e-9);
        }
    }
}
