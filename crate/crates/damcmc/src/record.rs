//! Chain persistence: the per-step CSV log, the stage-1-only companion log,
//! state snapshots, and content hashing for reproducibility checks.
//!
//! One CSV row per step. Row 0 is the initial state with blank outcome
//! fields. The `log_post` column is filled only on steps that ran the exact
//! map (so the log doubles as an exact-call audit); consumers reconstruct
//! the full series by carrying the last filled value forward, which is exact
//! because the state never moves on screened-out steps. Timing columns hold
//! wall-clock nanoseconds and are excluded from content hashes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eem::EemState;
use crate::error::{Error, Result};
use crate::samplers::proposal::ProposalState;

/// One chain step as logged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub x: Vec<f64>,
    pub log_post: Option<f64>,
    pub stage1_accepted: Option<bool>,
    pub stage2_evaluated: Option<bool>,
    pub stage2_accepted: Option<bool>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub t_reduced_ns: Option<u64>,
    pub t_exact_ns: Option<u64>,
}

/// One step of the stage-1-only companion trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShadowRow {
    pub step: u64,
    pub x: Vec<f64>,
    pub stage1_accepted: Option<bool>,
    pub alpha: Option<f64>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn fmt_opt_bool(v: Option<bool>) -> String {
    v.map(|b| b.to_string()).unwrap_or_default()
}

fn fmt_opt_u64(v: Option<u64>) -> String {
    v.map(|n| n.to_string()).unwrap_or_default()
}

/// Renders the chain rows as CSV with the documented column order.
pub fn write_chain_csv(rows: &[StepRow], dim: usize) -> String {
    let mut out = String::new();
    out.push_str("step");
    for i in 0..dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(
        ",log_post,stage1_accepted,stage2_evaluated,stage2_accepted,alpha,beta,t_reduced_ns,t_exact_ns\n",
    );
    for row in rows {
        out.push_str(&row.step.to_string());
        for v in &row.x {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push(',');
        out.push_str(&fmt_opt_f64(row.log_post));
        out.push(',');
        out.push_str(&fmt_opt_bool(row.stage1_accepted));
        out.push(',');
        out.push_str(&fmt_opt_bool(row.stage2_evaluated));
        out.push(',');
        out.push_str(&fmt_opt_bool(row.stage2_accepted));
        out.push(',');
        out.push_str(&fmt_opt_f64(row.alpha));
        out.push(',');
        out.push_str(&fmt_opt_f64(row.beta));
        out.push(',');
        out.push_str(&fmt_opt_u64(row.t_reduced_ns));
        out.push(',');
        out.push_str(&fmt_opt_u64(row.t_exact_ns));
        out.push('\n');
    }
    out
}

/// Renders the companion rows as CSV.
pub fn write_shadow_csv(rows: &[ShadowRow], dim: usize) -> String {
    let mut out = String::new();
    out.push_str("step");
    for i in 0..dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(",stage1_accepted,alpha\n");
    for row in rows {
        out.push_str(&row.step.to_string());
        for v in &row.x {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push(',');
        out.push_str(&fmt_opt_bool(row.stage1_accepted));
        out.push(',');
        out.push_str(&fmt_opt_f64(row.alpha));
        out.push('\n');
    }
    out
}

/// A parsed chain file. `error_marker` carries the message of a run that was
/// flushed mid-failure; rows before the marker are valid.
#[derive(Clone, Debug)]
pub struct ParsedChain {
    pub dim: usize,
    pub rows: Vec<StepRow>,
    pub error_marker: Option<String>,
}

fn bad_chain(reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: "chain.csv".into(),
        reason: reason.into(),
    }
}

fn parse_opt<T: std::str::FromStr>(field: &str, what: &str) -> Result<Option<T>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<T>()
        .map(Some)
        .map_err(|_| bad_chain(format!("bad {what} value `{field}`")))
}

/// Parses a chain CSV produced by [`write_chain_csv`].
pub fn parse_chain_csv(text: &str) -> Result<ParsedChain> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad_chain("empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 10 || cols[0] != "step" || cols[cols.len() - 1] != "t_exact_ns" {
        return Err(bad_chain("unrecognized header"));
    }
    let dim = cols.len() - 9;
    let mut rows = Vec::new();
    let mut error_marker = None;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(msg) = line.strip_prefix("# error:") {
            error_marker = Some(msg.trim().to_string());
            break;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != dim + 9 {
            return Err(bad_chain(format!(
                "row with {} fields, expected {}",
                f.len(),
                dim + 9
            )));
        }
        let step = f[0]
            .parse()
            .map_err(|_| bad_chain(format!("bad step index `{}`", f[0])))?;
        let mut x = Vec::with_capacity(dim);
        for v in &f[1..=dim] {
            x.push(
                v.parse()
                    .map_err(|_| bad_chain(format!("bad state value `{v}`")))?,
            );
        }
        rows.push(StepRow {
            step,
            x,
            log_post: parse_opt(f[dim + 1], "log_post")?,
            stage1_accepted: parse_opt(f[dim + 2], "stage1_accepted")?,
            stage2_evaluated: parse_opt(f[dim + 3], "stage2_evaluated")?,
            stage2_accepted: parse_opt(f[dim + 4], "stage2_accepted")?,
            alpha: parse_opt(f[dim + 5], "alpha")?,
            beta: parse_opt(f[dim + 6], "beta")?,
            t_reduced_ns: parse_opt(f[dim + 7], "t_reduced_ns")?,
            t_exact_ns: parse_opt(f[dim + 8], "t_exact_ns")?,
        });
    }
    Ok(ParsedChain {
        dim,
        rows,
        error_marker,
    })
}

/// SHA-256 over the CSV with the two trailing timing columns removed from
/// every line, so reruns hash identically despite wall-clock jitter.
pub fn content_hash(csv: &str) -> String {
    let mut hasher = Sha256::new();
    for line in csv.lines() {
        let mut fields: Vec<&str> = line.split(',').collect();
        let keep = fields.len().saturating_sub(2);
        fields.truncate(keep);
        hasher.update(fields.join(",").as_bytes());
        hasher.update(b"\n");
    }
    format!("{:x}", hasher.finalize())
}

/// SHA-256 of a byte string, for config fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Everything needed to inspect or resume the sampler's adapted state.
#[derive(Serialize, Deserialize)]
pub struct StateSnapshot {
    pub config_hash: String,
    pub proposal: ProposalState,
    pub eem: EemState,
    /// ChaCha word position, serialized as text because it exceeds JSON's
    /// safe integer range.
    pub rng_word_pos: String,
}

impl StateSnapshot {
    pub fn new(
        config_hash: String,
        proposal: ProposalState,
        eem: EemState,
        rng_word_pos: u128,
    ) -> Self {
        Self {
            config_hash,
            proposal,
            eem,
            rng_word_pos: rng_word_pos.to_string(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
