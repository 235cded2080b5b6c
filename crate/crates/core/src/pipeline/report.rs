use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthdata::{Dataset, Sample};

use super::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    SourceOnly,
    Pft,
    Oracle,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::SourceOnly, Setting::Pft, Setting::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Setting::SourceOnly => "source_only",
            Setting::Pft => "pft",
            Setting::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown setting `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub subject_id: u32,
    pub setting: Setting,
    pub accuracy: f64,
    pub n_test: usize,
}

/// Per-subject accuracies for each setting, tagged with the run manifest hash.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub manifest_hash: String,
    pub rows: Vec<EvalRow>,
}

const AVG: &str = "avg";
const HEADER: [&str; 6] = [
    "manifest_hash",
    "subject_id",
    "setting",
    "accuracy",
    "accuracy_raw",
    "n_test",
];

impl EvalReport {
    pub fn new(manifest_hash: impl Into<String>) -> Self {
        EvalReport {
            manifest_hash: manifest_hash.into(),
            rows: Vec::new(),
        }
    }

    pub fn settings(&self) -> Vec<Setting> {
        let mut s: Vec<Setting> = self.rows.iter().map(|r| r.setting).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.rows.iter().map(|r| r.subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn accuracy(&self, subject_id: u32, setting: Setting) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.subject_id == subject_id && r.setting == setting)
            .map(|r| r.accuracy)
    }

    /// Arithmetic mean over the subjects of one setting.
    pub fn average(&self, setting: Setting) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.setting == setting)
            .map(|r| r.accuracy)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn sorted_rows(&self) -> Vec<&EvalRow> {
        let mut rows: Vec<&EvalRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| (r.setting, r.subject_id));
        rows
    }

    /// Rows ordered by setting then subject, followed by one average row per
    /// setting. Accuracy is printed with 2 decimals and at full precision.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for r in self.sorted_rows() {
            w.write_record([
                self.manifest_hash.clone(),
                r.subject_id.to_string(),
                r.setting.to_string(),
                format!("{:.2}", r.accuracy),
                r.accuracy.to_string(),
                r.n_test.to_string(),
            ])?;
        }
        for s in self.settings() {
            let avg = self.average(s).expect("setting present");
            let n: usize = self.rows.iter().filter(|r| r.setting == s).map(|r| r.n_test).sum();
            w.write_record([
                self.manifest_hash.clone(),
                AVG.to_string(),
                s.to_string(),
                format!("{avg:.2}"),
                avg.to_string(),
                n.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<report csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Contract(e.to_string()))
    }

    /// Parses a CSV written by [`EvalReport::write_csv`]; average rows are
    /// recomputed rather than read.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != HEADER {
            return Err(Error::Contract(format!("unexpected report header {header:?}")));
        }
        let mut hash: Option<String> = None;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let h = rec[0].to_string();
            match &hash {
                None => hash = Some(h),
                Some(prev) if *prev != h => {
                    return Err(Error::Contract(format!(
                        "report mixes manifests {prev} and {h}"
                    )))
                }
                _ => {}
            }
            if &rec[1] == AVG {
                continue;
            }
            let bad = |what: &str| Error::Contract(format!("bad {what} in report row {rec:?}"));
            rows.push(EvalRow {
                subject_id: rec[1].parse().map_err(|_| bad("subject_id"))?,
                setting: rec[2].parse()?,
                accuracy: rec[4].parse().map_err(|_| bad("accuracy_raw"))?,
                n_test: rec[5].parse().map_err(|_| bad("n_test"))?,
            });
        }
        Ok(EvalReport {
            manifest_hash: hash.unwrap_or_default(),
            rows,
        })
    }
}

/// Settings-by-subjects accuracy table with an average column.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportMatrix {
    pub manifest_hash: String,
    pub subjects: Vec<u32>,
    /// `(setting, per-subject accuracies, average)`.
    pub rows: Vec<(Setting, Vec<Option<f64>>, f64)>,
}

/// Merges reports from one run into a single matrix. Reports carrying
/// different manifest hashes are refused, as are duplicate cells.
pub fn merge_reports(reports: &[EvalReport]) -> Result<ReportMatrix> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("no reports to merge".into()))?;
    if let Some(r) = reports.iter().find(|r| r.manifest_hash != first.manifest_hash) {
        return Err(Error::Contract(format!(
            "manifest mismatch: {} vs {}",
            first.manifest_hash, r.manifest_hash
        )));
    }
    let mut cells: BTreeMap<(Setting, u32), f64> = BTreeMap::new();
    for row in reports.iter().flat_map(|r| &r.rows) {
        if cells.insert((row.setting, row.subject_id), row.accuracy).is_some() {
            return Err(Error::Contract(format!(
                "duplicate row for subject {} / {}",
                row.subject_id, row.setting
            )));
        }
    }
    let mut subjects: Vec<u32> = cells.keys().map(|k| k.1).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let mut settings: Vec<Setting> = cells.keys().map(|k| k.0).collect();
    settings.dedup();
    let rows = settings
        .into_iter()
        .map(|s| {
            let vals: Vec<Option<f64>> = subjects.iter().map(|&id| cells.get(&(s, id)).copied()).collect();
            let present: Vec<f64> = vals.iter().flatten().copied().collect();
            let avg = present.iter().sum::<f64>() / present.len() as f64;
            (s, vals, avg)
        })
        .collect();
    Ok(ReportMatrix {
        manifest_hash: first.manifest_hash.clone(),
        subjects,
        rows,
    })
}

impl ReportMatrix {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["setting".to_string()];
        header.extend(self.subjects.iter().map(|s| format!("sub-{s}")));
        header.push("Avg.".into());
        header.push("manifest_hash".into());
        w.write_record(&header)?;
        for (s, vals, avg) in &self.rows {
            let mut rec = vec![s.to_string()];
            rec.extend(vals.iter().map(|v| v.map_or(String::new(), |a| format!("{a:.2}"))));
            rec.push(format!("{avg:.2}"));
            rec.push(self.manifest_hash.clone());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<matrix csv>", e))?;
        Ok(())
    }
}

/// Configuration echo plus a content hash of every input of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub content_hash: String,
}

fn hash_samples(h: &mut Sha256, samples: &[Sample]) {
    h.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        h.update(s.subject_id.to_le_bytes());
        h.update(s.frame_id.to_le_bytes());
        h.update((s.label as u64).to_le_bytes());
        for v in &s.x {
            h.update(v.to_le_bytes());
        }
    }
}

impl RunManifest {
    pub fn new(config: &RunConfig, data: &Dataset) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config)?);
        h.update(serde_json::to_vec(&data.profiles)?);
        hash_samples(&mut h, &data.source_train);
        hash_samples(&mut h, &data.source_val);
        for t in &data.targets {
            h.update(t.subject_id.to_le_bytes());
            hash_samples(&mut h, &t.adapt);
            hash_samples(&mut h, &t.oracle_train);
            hash_samples(&mut h, &t.test);
        }
        let digest = h.finalize();
        let content_hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(RunManifest {
            config: config.clone(),
            seed: config.train.seed,
            content_hash,
        })
    }

    /// Short form embedded in output files.
    pub fn short_hash(&self) -> &str {
        &self.content_hash[..16]
    }
}
