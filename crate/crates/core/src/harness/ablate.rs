use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{io_err, EmbedderConfig, EvalMode, HarnessError, Provenance, RunConfig, SplitName, Workspace};
use crate::metrics::{MetricMeans, RewardMetric};
use crate::querygen::TemplateId;
use crate::util::{self, write_json_pretty};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationToggle {
    AppendUtterance,
    FilterParams,
    RewardMetric,
    IntentTemplate,
}

impl AblationToggle {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AppendUtterance => "append_utterance",
            Self::FilterParams => "filter_params",
            Self::RewardMetric => "reward_metric",
            Self::IntentTemplate => "intent_template",
        }
    }

    /// Modes whose results the toggle can change.
    pub fn modes(self) -> Vec<EvalMode> {
        match self {
            Self::AppendUtterance => vec![EvalMode::ZeroShot, EvalMode::Sft, EvalMode::Aligned],
            _ => vec![EvalMode::Aligned],
        }
    }
}

impl std::str::FromStr for AblationToggle {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [Self::AppendUtterance, Self::FilterParams, Self::RewardMetric, Self::IntentTemplate]
            .into_iter()
            .find(|t| t.as_str() == s.replace('-', "_"))
            .ok_or_else(|| {
                format!("unknown toggle {s:?}; expected append_utterance, filter_params, reward_metric or intent_template")
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub label: String,
    pub config: RunConfig,
}

/// The alternative settings compared against the baseline for `toggle`. Each
/// variant runs in its own directory under `<run_dir>/ablate/`.
pub fn ablation_variants(base: &RunConfig, toggle: AblationToggle) -> Vec<AblationVariant> {
    let mut out = Vec::new();
    let mut add = |label: &str, slug: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c.run_dir = base.run_dir.join("ablate").join(toggle.as_str()).join(slug);
        if let EmbedderConfig::Http { cache_path, .. } = &mut c.embedder {
            if cache_path.is_none() {
                *cache_path = Some(base.run_dir.join("cache").join("embeddings.jsonl"));
            }
        }
        out.push(AblationVariant {
            label: label.to_string(),
            config: c,
        });
    };
    match toggle {
        AblationToggle::AppendUtterance => {
            let on = base.retrieval.append_utterance;
            add(if on { "-utt" } else { "+utt" }, "flipped", &|c| c.retrieval.append_utterance = !on);
        }
        AblationToggle::FilterParams => {
            add("Reduced p_top", "p_top_75", &|c| c.filter.p_top = 75.0);
            add("Increased r_min", "r_min_0.3", &|c| c.filter.r_min = 0.3);
            add("Decreased r_min", "r_min_0", &|c| c.filter.r_min = 0.0);
            add("Increased n_draft", "n_draft_2", &|c| c.filter.n_draft = 2);
        }
        AblationToggle::RewardMetric => {
            for m in [RewardMetric::Mmrr, RewardMetric::Map, RewardMetric::AvgRecall5_11] {
                if m != base.filter.reward_metric {
                    let slug = format!("{m:?}").to_lowercase();
                    add(&m.to_string(), &slug, &|c| c.filter.reward_metric = m);
                }
            }
        }
        AblationToggle::IntentTemplate => {
            let other = match base.template {
                TemplateId::ToolDescription => TemplateId::Intent,
                TemplateId::Intent => TemplateId::ToolDescription,
            };
            let label = match other {
                TemplateId::Intent => "Intent Generation",
                TemplateId::ToolDescription => "Description Generation",
            };
            add(label, "template", &|c| c.template = other);
        }
    }
    out
}

const PATH_KEYS: [&str; 3] = ["run_dir", "corpus_dir", "cache_path"];

fn diff_values(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                if PATH_KEYS.contains(&k.as_str()) {
                    continue;
                }
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                diff_values(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

/// Dotted paths of settings that differ between two configs; directory and cache
/// paths are ignored.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    diff_values(
        "",
        &serde_json::to_value(a).expect("serializable config"),
        &serde_json::to_value(b).expect("serializable config"),
        &mut out,
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub variant: String,
    pub mode: EvalMode,
    pub split: SplitName,
    pub baseline: MetricMeans,
    pub variant_metrics: MetricMeans,
    /// `variant - baseline`.
    pub delta: MetricMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub toggle: String,
    pub rows: Vec<DeltaRow>,
    pub config_diffs: BTreeMap<String, Vec<String>>,
    pub variant_run_dirs: BTreeMap<String, PathBuf>,
    pub provenance: Provenance,
}

fn delta(a: &MetricMeans, b: &MetricMeans) -> MetricMeans {
    MetricMeans {
        mmrr: b.mmrr - a.mmrr,
        map: b.map - a.map,
        recall: a
            .recall
            .iter()
            .map(|(c, v)| (*c, b.recall.get(c).copied().unwrap_or(0.0) - v))
            .collect(),
    }
}

fn prepare(ws: &Workspace, modes: &[EvalMode]) -> Result<(), HarnessError> {
    if modes.contains(&EvalMode::Sft) {
        ws.stage_sft()?;
    }
    if modes.contains(&EvalMode::Aligned) {
        ws.stage_align()?;
    }
    Ok(())
}

/// Evaluates `modes` on both test splits for the baseline and each variant and
/// reports per-metric deltas.
pub fn ablate_variants(
    ws: &Workspace,
    toggle: &str,
    variants: &[AblationVariant],
    modes: &[EvalMode],
) -> Result<AblationReport, HarnessError> {
    prepare(ws, modes)?;
    let splits: Vec<SplitName> = SplitName::TESTS
        .into_iter()
        .filter(|s| !ws.requests_for(*s).is_empty())
        .collect();
    let mut baseline = BTreeMap::new();
    for &m in modes {
        for &s in &splits {
            baseline.insert((m, s), ws.evaluate(m, s)?.metrics);
        }
    }
    let mut rows = Vec::new();
    let mut config_diffs = BTreeMap::new();
    let mut variant_run_dirs = BTreeMap::new();
    for v in variants {
        config_diffs.insert(v.label.clone(), config_diff(&ws.config, &v.config));
        variant_run_dirs.insert(v.label.clone(), v.config.run_dir.clone());
        let vws = Workspace::open(v.config.clone())?;
        prepare(&vws, modes)?;
        for &m in modes {
            for &s in &splits {
                let vm = vws.evaluate(m, s)?.metrics;
                let b = &baseline[&(m, s)];
                rows.push(DeltaRow {
                    variant: v.label.clone(),
                    mode: m,
                    split: s,
                    baseline: b.clone(),
                    delta: delta(b, &vm),
                    variant_metrics: vm,
                });
            }
        }
    }
    Ok(AblationReport {
        toggle: toggle.to_string(),
        rows,
        config_diffs,
        variant_run_dirs,
        provenance: ws.provenance(),
    })
}

/// Runs the standard variants for `toggle` and writes
/// `<run_dir>/ablate/<toggle>.{json,txt}`.
pub fn ablate(ws: &Workspace, toggle: AblationToggle) -> Result<AblationReport, HarnessError> {
    let report = ablate_variants(ws, toggle.as_str(), &ablation_variants(&ws.config, toggle), &toggle.modes())?;
    let dir = ws.run_dir().join("ablate");
    let p = dir.join(format!("{}.json", toggle.as_str()));
    write_json_pretty(&p, &report).map_err(|e| io_err(&p, e))?;
    let p = dir.join(format!("{}.txt", toggle.as_str()));
    util::write_atomic(&p, render_ablation(&report).as_bytes()).map_err(|e| io_err(&p, e))?;
    Ok(report)
}

/// Delta table: one block per split, metric rows, one column per (variant, mode).
pub fn render_ablation(report: &AblationReport) -> String {
    let mut columns: Vec<(String, EvalMode)> = Vec::new();
    for r in &report.rows {
        let c = (r.variant.clone(), r.mode);
        if !columns.contains(&c) {
            columns.push(c);
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "Delta wrt. baseline ({})", report.toggle);
    let header: Vec<String> = columns.iter().map(|(v, m)| format!("{}({v})", m.label())).collect();
    let _ = writeln!(out, "{:<12}{}", "Metric", header.iter().map(|h| format!("{h:>28}")).collect::<String>());
    for split in SplitName::TESTS {
        let rows: Vec<&DeltaRow> = report.rows.iter().filter(|r| r.split == split).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(out, "{} Evaluation", split.label());
        let cell = |col: &(String, EvalMode), f: &dyn Fn(&MetricMeans) -> String| {
            rows.iter()
                .find(|r| r.variant == col.0 && r.mode == col.1)
                .map_or_else(|| "-".to_string(), |r| f(&r.delta))
        };
        let mut line = |name: &str, f: &dyn Fn(&MetricMeans) -> String| {
            let cells: String = columns.iter().map(|c| format!("{:>28}", cell(c, f))).collect();
            let _ = writeln!(out, "{name:<12}{cells}");
        };
        line("MMRR", &|m| format!("{:.4}", m.mmrr));
        line("MAP", &|m| format!("{:.4}", m.map));
        let cutoffs: Vec<usize> = rows[0].delta.recall.keys().copied().collect();
        for c in cutoffs {
            line(&format!("Recall@{c}"), &|m| format!("{:.2}%", 100.0 * m.recall.get(&c).copied().unwrap_or(0.0)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_metric_toggle_only_changes_reward_path() {
        let base = RunConfig::default();
        for v in ablation_variants(&base, AblationToggle::RewardMetric) {
            assert_eq!(config_diff(&base, &v.config), ["filter.reward_metric"]);
        }
    }

    #[test]
    fn filter_variants() {
        let base = RunConfig::default();
        let diffs: Vec<Vec<String>> = ablation_variants(&base, AblationToggle::FilterParams)
            .iter()
            .map(|v| config_diff(&base, &v.config))
            .collect();
        assert_eq!(diffs, [vec!["filter.p_top"], vec!["filter.r_min"], vec!["filter.r_min"], vec!["filter.n_draft"]]);
        assert!(config_diff(&base, &base).is_empty());
    }

    #[test]
    fn toggles_parse() {
        assert_eq!("append-utterance".parse::<AblationToggle>(), Ok(AblationToggle::AppendUtterance));
        assert!("bogus".parse::<AblationToggle>().is_err());
    }
}
