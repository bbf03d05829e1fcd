//! Dataset and posterior file formats.
//!
//! Datasets are a CSV pair (analyst-facing): `subjects.csv` with one row per
//! subject and `longitudinal.csv` with one row per measurement, joined on
//! `id`. Simulated datasets add `latent.csv` with the generating truth per
//! subject. Posterior output is a directory with `samples.csv` (long format)
//! plus `summary.json` and `diagnostics.json`. JSON schemas carry a
//! `format_version` field; the dataset directory documents its own schema in
//! `manifest.json`.
//!
//! All numbers are written with the shortest representation that round-trips
//! exactly, so identical in-memory values produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::metrics::ReplicateDraws;
use crate::model::{EventStatus, PatientRecord};
use crate::sampler::PosteriorSamples;
use crate::simulator::{LatentRecord, SimulatedDataset};

pub const FORMAT_VERSION: u32 = 1;

pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const LONGITUDINAL_FILE: &str = "longitudinal.csv";
pub const LATENT_FILE: &str = "latent.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Threshold used to flag non-convergence in `diagnostics.json`.
pub const RHAT_WARN_THRESHOLD: f64 = 1.1;

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    match field.trim() {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        s => s
            .parse()
            .map_err(|_| Error::data_at(line, format!("cannot parse {what} from `{s}`"))),
    }
}

/// Write a dataset (and, when present, its latent truth) into `dir`.
pub fn write_dataset(
    dir: &Path,
    patients: &[PatientRecord],
    latents: Option<&[LatentRecord]>,
    seed: Option<u64>,
) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut subjects = String::from("id,age,psad,delta,terminal_time,biopsy_times\n");
    let mut longitudinal = String::from("id,time,y\n");
    for p in patients {
        let biopsies: Vec<String> = p.biopsy_times.iter().map(|t| fmt(*t)).collect();
        subjects.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.id,
            fmt(p.age),
            fmt(p.psad),
            p.status.code(),
            fmt(p.terminal_time),
            biopsies.join(";")
        ));
        for &(t, y) in &p.measurements {
            longitudinal.push_str(&format!("{},{},{}\n", p.id, fmt(t), fmt(y)));
        }
    }
    fs::write(dir.join(SUBJECTS_FILE), subjects)?;
    fs::write(dir.join(LONGITUDINAL_FILE), longitudinal)?;

    if let Some(latents) = latents {
        let mut latent =
            String::from("id,u0,u1,u2,u3,progression_time,treatment_time,first_cause\n");
        for l in latents {
            latent.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                l.id,
                fmt(l.u[0]),
                fmt(l.u[1]),
                fmt(l.u[2]),
                fmt(l.u[3]),
                fmt(l.progression_time.unwrap_or(f64::INFINITY)),
                fmt(l.treatment_time.unwrap_or(f64::INFINITY)),
                l.first_cause
            ));
        }
        fs::write(dir.join(LATENT_FILE), latent)?;
    }

    let manifest = json!({
        "format_version": FORMAT_VERSION,
        "n_subjects": patients.len(),
        "seed": seed,
        "files": {
            SUBJECTS_FILE: "id, age (years), psad (ng/ml^2), delta (0 censored / 1 progression detected / 2 treated), terminal_time (years), biopsy_times (semicolon-separated years, first always 0)",
            LONGITUDINAL_FILE: "id, time (years), y (log2(PSA+1))",
            LATENT_FILE: "id, u0..u3, progression_time, treatment_time (inf when absent), first_cause (0/1/2)",
        },
    });
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn write_simulated_dataset(dir: &Path, ds: &SimulatedDataset) -> Result<()> {
    write_dataset(dir, &ds.patients, Some(&ds.latents), Some(ds.seed))
}

/// Load the CSV pair from `dir`. Errors carry 1-based line numbers of the
/// offending file.
pub fn load_dataset(dir: &Path) -> Result<Vec<PatientRecord>> {
    let subjects_path = dir.join(SUBJECTS_FILE);
    let longitudinal_path = dir.join(LONGITUDINAL_FILE);
    let mut order = Vec::new();
    let mut by_id: BTreeMap<String, PatientRecord> = BTreeMap::new();

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&subjects_path)
        .map_err(|e| Error::data(format!("{}: {e}", subjects_path.display())))?;
    {
        let headers = rdr.headers()?.clone();
        let expect = ["id", "age", "psad", "delta", "terminal_time", "biopsy_times"];
        if headers.iter().collect::<Vec<_>>() != expect {
            return Err(Error::data(format!(
                "{} must have columns {expect:?}",
                subjects_path.display()
            )));
        }
    }
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2; // header is line 1
        let row = row?;
        if row.len() != 6 {
            return Err(Error::data_at(line, "expected 6 columns"));
        }
        let id = row[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::data_at(line, "empty subject id"));
        }
        if by_id.contains_key(&id) {
            return Err(Error::data_at(line, format!("duplicate subject id `{id}`")));
        }
        let age = parse_f64(&row[1], line, "age")?;
        let psad = parse_f64(&row[2], line, "psad")?;
        let delta: u8 = row[3]
            .trim()
            .parse()
            .map_err(|_| Error::data_at(line, format!("cannot parse delta from `{}`", &row[3])))?;
        let status = EventStatus::from_code(delta)
            .map_err(|e| Error::data_at(line, e.to_string()))?;
        let terminal_time = parse_f64(&row[4], line, "terminal_time")?;
        let mut biopsy_times = Vec::new();
        for part in row[5].split(';') {
            biopsy_times.push(parse_f64(part, line, "biopsy time")?);
        }
        if !(psad > 0.0) {
            return Err(Error::data_at(line, "psad must be positive"));
        }
        order.push(id.clone());
        by_id.insert(
            id.clone(),
            PatientRecord {
                id,
                age,
                psad,
                log_psad: psad.ln(),
                measurements: Vec::new(),
                biopsy_times,
                status,
                terminal_time,
            },
        );
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&longitudinal_path)
        .map_err(|e| Error::data(format!("{}: {e}", longitudinal_path.display())))?;
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.len() != 3 {
            return Err(Error::data_at(line, "expected 3 columns"));
        }
        let id = row[0].trim();
        let t = parse_f64(&row[1], line, "measurement time")?;
        let y = parse_f64(&row[2], line, "measurement value")?;
        match by_id.get_mut(id) {
            Some(p) => p.measurements.push((t, y)),
            None => {
                return Err(Error::data_at(line, format!("measurement for unknown subject `{id}`")))
            }
        }
    }

    let records: Vec<PatientRecord> =
        order.into_iter().map(|id| by_id.remove(&id).unwrap()).collect();
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Load the latent truth table written next to a simulated dataset.
pub fn load_latents(dir: &Path) -> Result<Vec<LatentRecord>> {
    let path = dir.join(LATENT_FILE);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.len() != 8 {
            return Err(Error::data_at(line, "expected 8 columns"));
        }
        let opt = |v: f64| if v.is_finite() { Some(v) } else { None };
        out.push(LatentRecord {
            id: row[0].trim().to_string(),
            u: [
                parse_f64(&row[1], line, "u0")?,
                parse_f64(&row[2], line, "u1")?,
                parse_f64(&row[3], line, "u2")?,
                parse_f64(&row[4], line, "u3")?,
            ],
            progression_time: opt(parse_f64(&row[5], line, "progression time")?),
            treatment_time: opt(parse_f64(&row[6], line, "treatment time")?),
            first_cause: row[7]
                .trim()
                .parse()
                .map_err(|_| Error::data_at(line, "cannot parse first_cause"))?,
        });
    }
    Ok(out)
}

/// Write a fitted posterior into `dir`: long-format draws, summaries, and
/// diagnostics with a convergence flag.
pub fn write_posterior(dir: &Path, samples: &PosteriorSamples) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(SAMPLES_FILE))?);
    writeln!(f, "chain,iteration,parameter,value")?;
    let thin = samples.config.thin;
    let adapt = samples.config.n_adapt;
    for (c, chain) in samples.chains.iter().enumerate() {
        for (d, draw) in chain.iter().enumerate() {
            let iteration = adapt + (d + 1) * thin;
            for (p, name) in samples.param_names.iter().enumerate() {
                writeln!(f, "{},{},{},{}", c + 1, iteration, name, fmt(draw[p]))?;
            }
        }
    }
    f.flush()?;

    let summary = json!({
        "format_version": FORMAT_VERSION,
        "config": samples.config,
        "parameters": samples.summaries,
    });
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;

    let failures = samples.convergence_failures(RHAT_WARN_THRESHOLD);
    let diagnostics = json!({
        "format_version": FORMAT_VERSION,
        "rhat_threshold": RHAT_WARN_THRESHOLD,
        "converged": failures.is_empty(),
        "non_converged_parameters": failures,
        "parameters": samples.diagnostics,
    });
    fs::write(dir.join(DIAGNOSTICS_FILE), serde_json::to_string_pretty(&diagnostics)? + "\n")?;
    Ok(())
}

/// Pooled draws per parameter from a posterior directory.
pub fn load_posterior_draws(dir: &Path) -> Result<ReplicateDraws> {
    let path = dir.join(SAMPLES_FILE);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut rep = ReplicateDraws::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.len() != 4 {
            return Err(Error::data_at(line, "expected 4 columns"));
        }
        let value = parse_f64(&row[3], line, "draw value")?;
        rep.params.entry(row[2].to_string()).or_default().push(value);
    }
    if rep.params.is_empty() {
        return Err(Error::data(format!("{} holds no draws", path.display())));
    }
    Ok(rep)
}

/// Summary section of `summary.json` (used by consumers of fitted runs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredSummary {
    pub format_version: u32,
    pub parameters: Vec<crate::sampler::ParamSummary>,
}

pub fn load_summary(dir: &Path) -> Result<StoredSummary> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
    Ok(serde_json::from_str(&text)?)
}
