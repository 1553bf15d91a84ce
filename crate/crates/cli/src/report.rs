use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use capforge_core::metrics::MetricReport;
use capforge_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::pipeline::read_json;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub config_hash: String,
    pub meteor: f64,
    pub cider_d: f64,
    pub spice: f64,
    pub spider: f64,
    pub spider_fl: f64,
    pub fense: f64,
    pub vocab: usize,
    pub n_items: usize,
}

/// Hybrid versus beam, when both systems are present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Directions {
    pub fense_hybrid_ge_beam: bool,
    pub vocab_hybrid_gt_beam: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub config_hashes: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub directions: Option<Directions>,
}

fn extra_str(r: &MetricReport, key: &str) -> String {
    r.config
        .extra
        .get(key)
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string()
}

fn row(path: &Path, r: &MetricReport) -> ReportRow {
    let mut system = extra_str(r, "system");
    if system.is_empty() {
        system = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    ReportRow {
        system,
        config_hash: extra_str(r, "config_hash"),
        meteor: r.corpus.meteor,
        cider_d: r.corpus.cider_d,
        spice: r.corpus.spice,
        spider: r.corpus.spider,
        spider_fl: r.corpus.spider_fl,
        fense: r.corpus.fense,
        vocab: r.corpus.vocab,
        n_items: r.corpus.n_items,
    }
}

/// Compares metric reports side by side. Reports from different configs
/// are refused unless `allow_mismatch` is set.
pub fn compare(paths: &[PathBuf], allow_mismatch: bool) -> Result<Comparison> {
    if paths.is_empty() {
        return Err(Error::Input("report: no metric reports given".into()));
    }
    let mut rows = Vec::new();
    for p in paths {
        let r: MetricReport = read_json("report", p)?;
        rows.push(row(p, &r));
    }
    let mut hashes: Vec<String> = rows.iter().map(|r| r.config_hash.clone()).collect();
    hashes.sort();
    hashes.dedup();
    if hashes.len() > 1 && !allow_mismatch {
        return Err(Error::Data(format!(
            "report: inputs come from different configs ({}); pass --allow-hash-mismatch to compare anyway",
            hashes.join(", ")
        )));
    }
    let find = |name: &str| rows.iter().find(|r| r.system == name);
    let directions = match (find("hybrid"), find("beam")) {
        (Some(h), Some(b)) => Some(Directions {
            fense_hybrid_ge_beam: h.fense >= b.fense,
            vocab_hybrid_gt_beam: h.vocab > b.vocab,
        }),
        _ => None,
    };
    Ok(Comparison {
        config_hashes: hashes,
        rows,
        directions,
    })
}

pub fn markdown(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config: {}\n", c.config_hashes.join(", "));
    let _ = writeln!(
        s,
        "| system | METEOR-lite | CIDEr-D | SPICE-proxy | SPIDEr | SPIDEr-FL | FENSE-toy | Vocab |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for r in &c.rows {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            r.system, r.meteor, r.cider_d, r.spice, r.spider, r.spider_fl, r.fense, r.vocab
        );
    }
    if let Some(d) = &c.directions {
        let _ = writeln!(
            s,
            "\nhybrid FENSE ≥ beam: {}\nhybrid vocab > beam: {}",
            d.fense_hybrid_ge_beam, d.vocab_hybrid_gt_beam
        );
    }
    s
}

pub fn write(dir: &Path, c: &Comparison) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.md"), markdown(c))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(c)? + "\n")?;
    Ok(())
}
