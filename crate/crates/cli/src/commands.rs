use std::io::Write;
use std::path::Path;

use kbvqa_core::ablation::{render_svg, run_sweep, write_csv, Axis, SweepContext, SweepSpec};
use kbvqa_core::caption_ranker::RankedCaptions;
use kbvqa_core::config::RunConfig;
use kbvqa_core::jsonl::{write_json, write_jsonl};
use kbvqa_core::pipeline::Pipeline;
use kbvqa_core::runner::{self, load_store};
use kbvqa_core::shot_selector::{assign_shots, NeighborFile, ShotAssignment, ShotRanking};
use kbvqa_core::vqa_eval::MetricVariant;
use kbvqa_core::{Error, Result};
use serde::Serialize;

use crate::args::{AblateArgs, Common, EvalArgs, ReplayArgs, RunArgs};

/// Writes the JSON summary to stdout; a closed pipe is not an error.
fn print<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn neighbors(cfg: &RunConfig) -> Result<Option<NeighborFile>> {
    cfg.store.neighbors.as_deref().map(NeighborFile::load).transpose()
}

pub fn ingest(args: &Common) -> Result<()> {
    let cfg = args.resolve()?;
    let store = load_store(&cfg)?;
    let out = args.out_dir();
    store.export(&out)?;
    write_json(&out.join("store_manifest.json"), &store.manifest)?;
    print(&store.manifest)
}

pub fn rank_captions(args: &Common) -> Result<()> {
    let cfg = args.resolve()?;
    let store = load_store(&cfg)?;
    let pipeline = Pipeline::new(&store, cfg.pipeline_config()?)?;
    let ranked = pipeline
        .samples(cfg.run.limit)
        .into_iter()
        .map(|t| pipeline.test_captions(t))
        .collect::<Result<Vec<RankedCaptions>>>()?;
    let out = args.out_dir();
    create_dir(&out)?;
    write_jsonl(&out.join("captions.jsonl"), &ranked)?;
    print(&serde_json::json!({ "n_samples": ranked.len(), "m": pipeline.config().m }))
}

#[derive(Serialize)]
struct ShotRecord {
    test_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    ranking: Option<ShotRanking>,
    #[serde(skip_serializing_if = "Option::is_none")]
    assignment: Option<ShotAssignment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skipped: Option<String>,
}

pub fn select_shots(args: &Common) -> Result<()> {
    let cfg = args.resolve()?;
    let store = load_store(&cfg)?;
    let pcfg = cfg.pipeline_config()?;
    let nb = neighbors(&cfg)?;
    let mut pipeline = Pipeline::new(&store, pcfg.clone())?;
    if let Some(n) = &nb {
        pipeline = pipeline.with_neighbors(n);
    }
    let mut records = Vec::new();
    for t in pipeline.samples(cfg.run.limit) {
        let record = match pipeline.ranking(t)? {
            Some(r) => ShotRecord {
                test_id: t.id.clone(),
                assignment: Some(assign_shots(&r, pcfg.n, pcfg.k)?),
                ranking: Some(r),
                skipped: None,
            },
            None => ShotRecord {
                test_id: t.id.clone(),
                ranking: None,
                assignment: None,
                skipped: Some("no neighbor entry".into()),
            },
        };
        records.push(record);
    }
    let out = args.out_dir();
    create_dir(&out)?;
    write_jsonl(&out.join("shots.jsonl"), &records)?;
    let skipped = records.iter().filter(|r| r.skipped.is_some()).count();
    print(&serde_json::json!({
        "n_samples": records.len(),
        "n_skipped": skipped,
        "strategy": pcfg.strategy.to_string(),
    }))
}

pub fn build_prompts(args: &Common) -> Result<()> {
    let cfg = args.resolve()?;
    let out = args.out_dir();
    let bundles = runner::build_prompts(&cfg, &out, None)?;
    print(&serde_json::json!({
        "n_bundles": bundles.len(),
        "prompts_dir": out.join(runner::PROMPTS_DIR),
    }))
}

pub fn run(args: &RunArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    cfg.run.score |= args.score;
    if args.no_replay_log {
        cfg.run.record_replay = false;
    }
    let backend = cfg.backend.build()?;
    let summary = runner::run(&cfg, &args.common.out_dir(), backend, "run")?;
    print(&summary)?;
    if summary.n_failed > 0 && summary.n_predicted == 0 {
        return Err(Error::Backend(format!(
            "all {} samples failed; see summary.json",
            summary.n_failed
        )));
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let dataset = args
        .dataset
        .clone()
        .or(cfg.store.test.clone())
        .ok_or_else(|| Error::input("eval needs --dataset (or a configured test split)"))?;
    let variant = if args.direct_metric {
        MetricVariant::Direct
    } else {
        cfg.pipeline.metric
    };
    let (_, summary) = runner::eval_files(&args.predictions, &dataset, variant, Some(&args.common.out_dir()))?;
    print(&summary)
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let axis: Axis = args.axis.parse()?;
    let store = load_store(&cfg)?;
    let backend = cfg.backend.build()?;
    let nb = neighbors(&cfg)?;
    let spec = SweepSpec {
        axis,
        values: args.values.clone(),
        fixed: cfg.pipeline_config()?,
        seed: cfg.run.seed,
        jobs: cfg.run.jobs,
        limit: cfg.run.limit,
        use_cache: !args.no_cache,
    };
    let ctx = SweepContext {
        store: &store,
        backend: backend.as_ref(),
        neighbors: nb.as_ref(),
        token_counter: None,
    };
    let result = run_sweep(&spec, &ctx)?;
    let out = args.common.out_dir();
    create_dir(&out)?;
    write_csv(&result, &out.join("sweep.csv"))?;
    write_json(&out.join("sweep.json"), &result)?;
    if args.svg {
        match render_svg(&result) {
            Some(svg) => {
                let path = out.join("sweep.svg");
                std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            }
            None => eprintln!("no numeric points to plot; sweep.svg not written"),
        }
    }
    print(&result)
}

pub fn replay(args: &ReplayArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let summary = runner::replay(&cfg, &args.common.out_dir(), &args.log)?;
    print(&summary)
}
