//! Self-describing output files: `#`-prefixed headers, tab-separated
//! tables and JSON-lines records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use landau_core::types::{DiagnosticRow, ParticleEnsemble};

use crate::config::Config;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Versioned file schemas, printed by `--schema`.
pub const SCHEMAS: &str = r#"landau-cert file schemas

trajectory.tsv (schema trajectory/1), written by simulate and certify
  header lines start with '#': schema, code version, seed, config_sha256,
  column units, then the resolved config, one '# config: ' line each.
  columns: t mass px py pz energy entropy fisher_s moment_k... lp_p...
           max_speed loss
  units: t [time]; mass [1]; p* [velocity]; energy [velocity^2];
         entropy [log density]; fisher_s [velocity^(s-2)];
         moment_k [velocity^k]; lp_p [density]; max_speed [velocity];
         loss [velocity^(gamma)] (nan when not certifying)

snapshots.jsonl (schema snapshots/1), written by simulate
  line 1: {"schema", "version", "seed", "config_sha256", "units"}
  then one record per particle and output time:
  {"t": f64, "i": usize, "v": [f64; d], "w": f64, "s": [f64; d]}

oracle.tsv (schema oracle/1), written by oracle
  header as trajectory.tsv; columns: t mass px py pz energy entropy
  fisher_s moment_k... lp_p... clipped_mass

certificate.json (schema certificate/1), written by certify
  {"schema", "version", "seed", "config_sha256", "mode",
   "coefficient_mode", "c_abs", "kl0", "c_lin", "valid",
   "invalid_reasons", "heuristics", "final_bound", "final_envelope",
   "final_measured_kl", "holds"}
certificate.tsv (schema certificate/1), written by certify
  columns: t loss ratio truncated_mass coefficient forcing integrated_rl
           bound envelope measured_kl

margins.tsv (schema margins/1), written by verify
  columns: pair points lhs dissipation remainder_diffusion remainder_drift
           c_coe rhs margin kl bracket kl_form_margin pinsker_l2_margin
           pinsker_l1_margin refined_margin margin_change
coercivity.tsv (schema coercivity/1), written by verify
  columns: pair points c_coe argmin_norm samples

diagnose.tsv (schema diagnose/1), written by diagnose
  particle columns as trajectory.tsv, then grid_entropy grid_fisher_s
  grid_h2_5 for the mollified ensemble on the configured grid
"#;

pub fn fmt(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:e}")
    }
}

/// Header lines shared by every text output.
pub fn header(schema: &str, cfg: &Config, units: &str) -> Result<String> {
    let mut h = String::new();
    h.push_str(&format!("# schema: {schema}\n"));
    h.push_str(&format!("# version: landau-cert {VERSION}\n"));
    h.push_str(&format!("# seed: {}\n", cfg.run.seed));
    h.push_str(&format!("# config_sha256: {}\n", cfg.hash()?));
    h.push_str(&format!("# units: {units}\n"));
    for line in cfg.to_toml()?.lines() {
        h.push_str(&format!("# config: {line}\n"));
    }
    Ok(h)
}

pub struct TsvWriter {
    out: BufWriter<File>,
    pub path: PathBuf,
}

impl TsvWriter {
    pub fn create(path: &Path, header: &str, columns: &[String]) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        let mut out = BufWriter::new(file);
        out.write_all(header.as_bytes())?;
        writeln!(out, "{}", columns.join("\t"))?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
        })
    }

    pub fn row(&mut self, values: &[f64]) -> Result<()> {
        let line: Vec<String> = values.iter().map(|v| fmt(*v)).collect();
        writeln!(self.out, "{}", line.join("\t"))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for TsvWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn diagnostic_columns(cfg: &Config) -> Vec<String> {
    let mut c: Vec<String> = ["t", "mass", "px", "py", "pz", "energy", "entropy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    c.push(format!("fisher_{}", cfg.diagnostics.fisher_weight));
    c.extend(cfg.diagnostics.moments.iter().map(|k| format!("moment_{k}")));
    c.extend(cfg.diagnostics.lp.iter().map(|p| format!("lp_{p}")));
    c
}

pub fn diagnostic_values(t: f64, row: &DiagnosticRow) -> Vec<f64> {
    let mut v = vec![t, row.mass, row.momentum[0], row.momentum[1], row.momentum[2], row.energy, row.entropy, row.fisher];
    v.extend(row.moments.iter().map(|m| m.1));
    v.extend(row.lp_norms.iter().map(|m| m.1));
    v
}

pub const TRAJECTORY_UNITS: &str = "t [time]; mass [1]; p* [velocity]; energy [velocity^2]; \
entropy [log density]; fisher [velocity^(s-2)]; moment_k [velocity^k]; lp_p [density]; \
max_speed [velocity]; loss [velocity^gamma]";

pub struct SnapshotWriter {
    out: BufWriter<File>,
    dim: usize,
}

impl SnapshotWriter {
    pub fn create(path: &Path, cfg: &Config) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        let mut out = BufWriter::new(file);
        let head = json!({
            "schema": "snapshots/1",
            "version": VERSION,
            "seed": cfg.run.seed,
            "config_sha256": cfg.hash()?,
            "units": {"t": "time", "v": "velocity", "w": "probability", "s": "1/velocity"},
        });
        writeln!(out, "{head}")?;
        Ok(Self {
            out,
            dim: cfg.kernel.dim,
        })
    }

    pub fn write(&mut self, t: f64, ensemble: &ParticleEnsemble, scores: &[[f64; 3]]) -> Result<()> {
        let d = self.dim;
        for (i, (v, w)) in ensemble.velocities.iter().zip(&ensemble.weights).enumerate() {
            let rec = json!({"t": t, "i": i, "v": &v[..d], "w": w, "s": &scores[i][..d]});
            writeln!(self.out, "{rec}")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for SnapshotWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Snapshots grouped by time, read back from a snapshot file.
pub fn read_snapshots(path: &Path, dim: usize) -> Result<Vec<(f64, ParticleEnsemble)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut groups: Vec<(f64, Vec<[f64; 3]>, Vec<f64>)> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let rec: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}: bad record", path.display(), n + 1))?;
        let t = rec["t"].as_f64().context("record without t")?;
        let w = rec["w"].as_f64().context("record without w")?;
        let mut v = [0.0; 3];
        let arr = rec["v"].as_array().context("record without v")?;
        for (k, x) in arr.iter().take(dim).enumerate() {
            v[k] = x.as_f64().context("non-numeric velocity")?;
        }
        match groups.last_mut() {
            Some(g) if g.0 == t => {
                g.1.push(v);
                g.2.push(w);
            }
            _ => groups.push((t, vec![v], vec![w])),
        }
    }
    groups
        .into_iter()
        .map(|(t, vs, ws)| Ok((t, ParticleEnsemble::new(dim, vs, ws)?)))
        .collect()
}

/// Reads the named columns of a TSV written by this tool.
pub fn read_tsv_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let head: Vec<&str> = lines.next().context("empty table")?.split('\t').collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| head.iter().position(|h| h == n).with_context(|| format!("missing column {n}")))
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        for (c, &i) in cols.iter_mut().zip(&idx) {
            c.push(fields[i].parse::<f64>().with_context(|| format!("bad number {}", fields[i]))?);
        }
    }
    Ok(cols)
}
