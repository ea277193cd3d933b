//! Parameter sweeps over captions per shot (m), shots (n), ensemble size
//! (k), shot strategy and caption type.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::backend::Backend;
use crate::config::resolve_strategy;
use crate::embedding_store::{Store, TestSample};
use crate::error::{Error, Result};
use crate::pipeline::{Pipeline, PipelineConfig, RankingCache, RunOutput};
use crate::prompt_builder::TokenCounter;
use crate::shot_selector::{NeighborFile, Strategy};
use crate::vqa_eval::{evaluate, EvalItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    M,
    N,
    K,
    Strategy,
    CaptionType,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(Axis::M),
            "n" => Ok(Axis::N),
            "k" => Ok(Axis::K),
            "strategy" => Ok(Axis::Strategy),
            "caption_type" => Ok(Axis::CaptionType),
            other => Err(Error::input(format!(
                "unknown axis {other:?}; expected m, n, k, strategy or caption_type"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::M => "m",
            Axis::N => "n",
            Axis::K => "k",
            Axis::Strategy => "strategy",
            Axis::CaptionType => "caption_type",
        })
    }
}

impl Axis {
    pub fn is_numeric(self) -> bool {
        matches!(self, Axis::M | Axis::N | Axis::K)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<String>,
    /// Configuration of every knob not being swept.
    pub fixed: PipelineConfig,
    /// Seed for a bare `random` strategy value.
    pub seed: u64,
    pub jobs: usize,
    pub limit: Option<usize>,
    /// Reuse shot rankings across points.
    pub use_cache: bool,
}

impl SweepSpec {
    /// Configuration for each requested value, in order.
    pub fn point_configs(&self) -> Result<Vec<PipelineConfig>> {
        if self.values.is_empty() {
            return Err(Error::input("sweep needs at least one value"));
        }
        self.values
            .iter()
            .map(|v| {
                let mut cfg = self.fixed.clone();
                let v = v.trim();
                let count = || {
                    v.parse::<usize>()
                        .ok()
                        .filter(|&x| x > 0)
                        .ok_or_else(|| Error::input(format!("axis {}: {v:?} is not a positive integer", self.axis)))
                };
                match self.axis {
                    Axis::M => cfg.m = count()?,
                    Axis::N => cfg.n = count()?,
                    Axis::K => cfg.k = count()?,
                    Axis::Strategy => cfg.strategy = resolve_strategy(v, self.seed)?,
                    Axis::CaptionType => cfg.caption_source = v.parse()?,
                }
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub accuracy_pct: Option<f64>,
    pub n_scored: usize,
    pub n_failed: usize,
    pub effective_n_mean: Option<f64>,
    pub wall_time_s: f64,
    /// Set when the whole point failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
}

/// Shared inputs for a sweep.
pub struct SweepContext<'a> {
    pub store: &'a Store,
    pub backend: &'a dyn Backend,
    pub neighbors: Option<&'a NeighborFile>,
    pub token_counter: Option<Arc<dyn TokenCounter>>,
}

impl SweepContext<'_> {
    fn pipeline<'p>(&'p self, cfg: PipelineConfig, cache: Option<&'p RankingCache>) -> Result<Pipeline<'p>> {
        let mut p = Pipeline::new(self.store, cfg)?;
        if let Some(n) = self.neighbors {
            p = p.with_neighbors(n);
        }
        if let Some(c) = self.token_counter.clone().or_else(|| self.backend.token_counter()) {
            p = p.with_token_counter(c);
        }
        if let Some(c) = cache {
            p = p.with_cache(c);
        }
        Ok(p)
    }

    /// One standalone pipeline run; what each sweep point must reproduce.
    pub fn run_point(&self, cfg: &PipelineConfig, jobs: usize, limit: Option<usize>) -> Result<RunOutput> {
        let p = self.pipeline(cfg.clone(), None)?;
        let samples = p.samples(limit);
        p.run(&samples, self.backend, jobs)
    }
}

/// Runs the pipeline once per value and scores it. Points run sequentially;
/// a point that fails outright yields a row with `error` set.
pub fn run_sweep(spec: &SweepSpec, ctx: &SweepContext<'_>) -> Result<SweepResult> {
    let configs = spec.point_configs()?;
    let mut samples: Vec<&TestSample> = ctx.store.test.iter().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(l) = spec.limit {
        samples.truncate(l);
    }
    let items: Vec<EvalItem> = samples
        .iter()
        .map(|t| EvalItem {
            id: t.id.clone(),
            human_answers: t.human_answers.clone(),
            question_type: t.question_type.clone(),
        })
        .collect();

    // One ranking cache per distinct strategy, deep enough for every point using it.
    let mut caches: HashMap<Strategy, RankingCache> = HashMap::new();
    if spec.use_cache {
        let mut depth: HashMap<Strategy, usize> = HashMap::new();
        for c in &configs {
            let d = depth.entry(c.strategy).or_default();
            *d = (*d).max(c.shots_needed());
        }
        for (strategy, d) in depth {
            match RankingCache::build(ctx.store, strategy, d, ctx.neighbors, &samples) {
                Ok(cache) => {
                    caches.insert(strategy, cache);
                }
                Err(e) => warn!(%strategy, error = %e, "ranking cache unavailable"),
            }
        }
    }

    let mut rows = Vec::with_capacity(configs.len());
    for (value, cfg) in spec.values.iter().zip(configs) {
        let started = Instant::now();
        let cache = caches.get(&cfg.strategy);
        let metric = cfg.metric;
        let outcome = ctx.pipeline(cfg, cache).and_then(|p| {
            let out = p.run(&samples, ctx.backend, spec.jobs)?;
            let (_, eval) = evaluate(&out.predictions, &items, metric)?;
            Ok((out, eval))
        });
        let wall_time_s = started.elapsed().as_secs_f64();
        let row = match outcome {
            Ok((out, eval)) => SweepRow {
                axis_value: value.trim().to_string(),
                accuracy_pct: eval.accuracy_pct,
                n_scored: eval.n_scored,
                n_failed: eval.n_failed,
                effective_n_mean: out.effective_n_mean(),
                wall_time_s,
                error: None,
            },
            Err(e) => {
                warn!(axis = %spec.axis, value = %value, error = %e, "sweep point failed");
                SweepRow {
                    axis_value: value.trim().to_string(),
                    accuracy_pct: None,
                    n_scored: 0,
                    n_failed: 0,
                    effective_n_mean: None,
                    wall_time_s,
                    error: Some(e.to_string()),
                }
            }
        };
        info!(axis = %spec.axis, value = %row.axis_value, accuracy = ?row.accuracy_pct, "sweep point done");
        rows.push(row);
    }
    Ok(SweepResult { axis: spec.axis, rows })
}

pub const CSV_HEADER: [&str; 6] = [
    "axis_value",
    "accuracy_pct",
    "n_scored",
    "n_failed",
    "effective_n_mean",
    "wall_time_s",
];

/// Writes the sweep as CSV. Failed points carry `failed` in `accuracy_pct`.
pub fn write_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::Backend(format!("cannot write {}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Backend(format!("writing {}: {e}", path.display()));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &result.rows {
        let acc = match (&r.error, r.accuracy_pct) {
            (Some(_), _) => "failed".to_string(),
            (None, Some(a)) => format!("{a:.4}"),
            (None, None) => String::new(),
        };
        w.write_record([
            r.axis_value.clone(),
            acc,
            r.n_scored.to_string(),
            r.n_failed.to_string(),
            r.effective_n_mean.map(|e| format!("{e:.4}")).unwrap_or_default(),
            format!("{:.3}", r.wall_time_s),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Accuracy-vs-value line chart for numeric axes.
pub fn render_svg(result: &SweepResult) -> Option<String> {
    if !result.axis.is_numeric() {
        return None;
    }
    let points: Vec<(f64, f64)> = result
        .rows
        .iter()
        .filter_map(|r| Some((r.axis_value.parse::<f64>().ok()?, r.accuracy_pct?)))
        .collect();
    if points.is_empty() {
        return None;
    }
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let (xmin, xmax) = bounds(points.iter().map(|p| p.0));
    let (ymin, ymax) = bounds(points.iter().map(|p| p.1));
    let sx = |x: f64| pad + (x - xmin) / (xmax - xmin) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - ymin) / (ymax - ymin) * (h - 2.0 * pad);
    let path: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
        .collect();
    let mut svg =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    svg.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - pad,
        r = w - pad
    ));
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
        path.join(" ")
    ));
    for &(x, y) in &points {
        svg.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"/>\n<text x=\"{:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{x}</text>\n",
            sx(x),
            sy(y),
            sx(x),
            h - pad + 16.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n<text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">accuracy (%) {ymin:.1}-{ymax:.1}</text>\n</svg>\n",
        w / 2.0,
        h - 8.0,
        result.axis,
        h / 2.0,
        h / 2.0
    ));
    Some(svg)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::CaptionSource;

    fn spec(axis: Axis, values: &[&str]) -> SweepSpec {
        SweepSpec {
            axis,
            values: values.iter().map(|s| s.to_string()).collect(),
            fixed: PipelineConfig::default(),
            seed: 3,
            jobs: 1,
            limit: None,
            use_cache: true,
        }
    }

    #[test]
    fn point_configs_follow_axis() {
        let cfgs = spec(Axis::M, &["1", "12"]).point_configs().unwrap();
        assert_eq!(cfgs.iter().map(|c| c.m).collect::<Vec<_>>(), vec![1, 12]);
        let cfgs = spec(Axis::Strategy, &["random", "random(seed=7)", "avg_sim"])
            .point_configs()
            .unwrap();
        assert_eq!(cfgs[0].strategy, Strategy::Random { seed: 3 });
        assert_eq!(cfgs[1].strategy, Strategy::Random { seed: 7 });
        assert_eq!(cfgs[2].strategy, Strategy::AvgSim);
        let cfgs = spec(Axis::CaptionType, &["generic"]).point_configs().unwrap();
        assert_eq!(cfgs[0].caption_source, CaptionSource::Generic);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(spec(Axis::K, &["0"]).point_configs().is_err());
        assert!(spec(Axis::N, &["many"]).point_configs().is_err());
        assert!(spec(Axis::K, &[]).point_configs().is_err());
        assert!("shots".parse::<Axis>().is_err());
    }

    #[test]
    fn svg_only_for_numeric_axes() {
        let row = |v: &str, a: f64| SweepRow {
            axis_value: v.into(),
            accuracy_pct: Some(a),
            n_scored: 1,
            n_failed: 0,
            effective_n_mean: Some(1.0),
            wall_time_s: 0.0,
            error: None,
        };
        let numeric = SweepResult {
            axis: Axis::K,
            rows: vec![row("1", 50.0), row("3", 55.0)],
        };
        let svg = render_svg(&numeric).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
        let categorical = SweepResult {
            axis: Axis::Strategy,
            rows: vec![row("avg_sim", 50.0)],
        };
        assert!(render_svg(&categorical).is_none());
    }
}
