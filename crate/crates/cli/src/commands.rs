use std::fs;
use std::path::{Path, PathBuf};

use layoutc_core::attention::{
    demo_denoise, load_weights, save_trajectory, save_weights, BlockMasks, BlockWeights, DenoiseConfig, GateConfig,
    GuidanceConfig,
};
use layoutc_core::eval::{
    counting_accuracy, glip_counts, glip_rate, hit_rate, join_count_cases, layout_miou, read_jsonl, relaxed_match,
    CountCaseSpec, DetectionRecord, EntityList, EvalReport, ItemRecord, LayoutPair,
};
use layoutc_core::layout::{validate_layout, Layout};
use layoutc_core::mask::{
    compile_cross_mask, compile_pyramid, compile_self_mask, cross_mask_oracle, read_mask, self_mask_oracle, write_mask,
    AnyMask, ResolutionSchedule,
};
use layoutc_core::parser::{find_caption, parse_response, ParseOptions};
use layoutc_core::prompt::{build_prompt, ExampleStore, PromptConfig};
use layoutc_core::provider::{ApiKey, CaptureLog, LayoutClient, ProviderConfig};
use layoutc_core::sample::random_bound_layout;
use layoutc_core::tokens::{bind_layout, bind_with_tokens, BoundLayout, TokenSeq, LEXICAL_TOKENIZER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{
    AttnCmd, BindArgs, Command, CompileArgs, CountArgs, DemoArgs, EvalCmd, GenerateArgs, GlipArgs, LayoutCmd, MaskCmd,
    PairsArgs, ParseArgs, PromptArgs, PromptCmd, CliError, ValidateArgs, VerifyArgs,
};

pub const API_KEY_ENV: &str = "LAYOUTC_API_KEY";
pub const ENDPOINT_ENV: &str = "LAYOUTC_ENDPOINT";

pub struct Outcome {
    pub summary: Value,
    /// The command ran but its check did not pass.
    pub failed: bool,
}

impl From<Value> for Outcome {
    fn from(summary: Value) -> Self {
        Self { summary, failed: false }
    }
}

pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<Outcome, CliError> {
    match command {
        Command::Prompt(PromptCmd::Build(a)) => prompt_build(&a.caption, &a.prompt, a.out.as_deref(), cfg).map(Into::into),
        Command::Layout(LayoutCmd::Generate(a)) => layout_generate(a, cfg).map(Into::into),
        Command::Layout(LayoutCmd::Parse(a)) => layout_parse(a, cfg).map(Into::into),
        Command::Layout(LayoutCmd::Validate(a)) => layout_validate(a),
        Command::Mask(MaskCmd::Compile(a)) => mask_compile(a, cfg).map(Into::into),
        Command::Mask(MaskCmd::Verify(a)) => mask_verify(a, cfg),
        Command::Attn(AttnCmd::Demo(a)) => attn_demo(a, cfg).map(Into::into),
        Command::Eval(EvalCmd::Miou(a)) => eval_miou(a).map(Into::into),
        Command::Eval(EvalCmd::Hitrate(a)) => eval_hitrate(a).map(Into::into),
        Command::Eval(EvalCmd::Gliprate(a)) => eval_glip(a, cfg).map(Into::into),
        Command::Eval(EvalCmd::Count(a)) => eval_count(a, cfg).map(Into::into),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_layout(path: &Path) -> Result<Layout, CliError> {
    Layout::from_json(&read(path)?).map_err(|e| CliError::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write(path, serde_json::to_string_pretty(value).map_err(CliError::domain)? + "\n")
}

fn prompt_config(args: &PromptArgs, cfg: &RunConfig) -> PromptConfig {
    PromptConfig {
        cot_variant: args.cot.unwrap_or(cfg.prompt.cot_variant),
        canvas_mode: args.canvas.unwrap_or(cfg.prompt.canvas_mode),
        coord_encoding: args.encoding.unwrap_or(cfg.prompt.coord_encoding),
        num_examples: args.examples.unwrap_or(cfg.prompt.num_examples),
    }
}

fn prompt_build(caption: &str, args: &PromptArgs, out: Option<&Path>, cfg: &RunConfig) -> Result<Value, CliError> {
    let config = prompt_config(args, cfg);
    let bundle = build_prompt(caption, &config).map_err(CliError::domain)?;
    let text = bundle.render();
    if let Some(out) = out {
        write(out, &text)?;
    }
    Ok(json!({
        "command": "prompt build",
        "prompt_sha256": bundle.sha256(),
        "chars": text.chars().count(),
        "examples": bundle.example_blocks.len(),
        "config": config,
        "out": out,
    }))
}

fn layout_generate(a: GenerateArgs, cfg: &RunConfig) -> Result<Value, CliError> {
    let config = prompt_config(&a.prompt, cfg);
    let bundle = build_prompt(&a.caption, &config).map_err(CliError::domain)?;
    let raw = if let Some(replay) = &a.replay {
        CaptureLog::new(replay).replay(&bundle).map_err(CliError::domain)?
    } else {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| CliError::Domain(format!("{API_KEY_ENV} is not set")))?;
        let endpoint = std::env::var(ENDPOINT_ENV)
            .ok()
            .or_else(|| cfg.provider.endpoint.clone())
            .ok_or_else(|| CliError::Domain(format!("{ENDPOINT_ENV} is not set and no endpoint is configured")))?;
        let mut provider = ProviderConfig::new(
            endpoint,
            a.model.clone().unwrap_or_else(|| cfg.provider.model.clone()),
            ApiKey::new(key),
        );
        provider.max_retries = a.max_retries.unwrap_or(cfg.provider.max_retries);
        provider.timeout = a
            .timeout_secs
            .map(std::time::Duration::from_secs)
            .unwrap_or_else(|| cfg.provider.timeout());
        provider.temperature = cfg.provider.temperature;
        let mut client = LayoutClient::new(provider).map_err(CliError::domain)?;
        if let Some(path) = &a.capture {
            client = client.with_capture(CaptureLog::new(path));
        }
        client.request_layout(&bundle).map_err(CliError::domain)?
    };
    if let Some(path) = &a.raw_out {
        write(path, &raw.text)?;
    }
    let (layout, report) = parse_response(&raw.text, &a.caption, &config.parse_options()).map_err(CliError::domain)?;
    if let Some(path) = &a.out {
        write_json(path, &layout)?;
    }
    Ok(json!({
        "command": "layout generate",
        "prompt_sha256": bundle.sha256(),
        "replayed": raw.replayed,
        "attempts": raw.attempts,
        "retries": raw.retries,
        "latency_ms": raw.latency_ms,
        "entries": layout.entries.len(),
        "parse": report,
        "out": a.out,
        "layout": if a.out.is_none() { serde_json::to_value(&layout).map_err(CliError::domain)? } else { Value::Null },
    }))
}

fn layout_parse(a: ParseArgs, cfg: &RunConfig) -> Result<Value, CliError> {
    if a.out.is_some() && a.inputs.len() > 1 {
        return Err(CliError::Domain("--out takes a single input; use --out-dir".into()));
    }
    let opts = ParseOptions {
        canvas_mode: a.canvas.unwrap_or(cfg.prompt.canvas_mode),
        coord_encoding: a.encoding.unwrap_or(cfg.prompt.coord_encoding),
        ..ParseOptions::default()
    };
    let results: Vec<Value> = a
        .inputs
        .par_iter()
        .map(|input| -> Result<Value, CliError> {
            let text = read(input)?;
            let caption = a
                .caption
                .clone()
                .or_else(|| find_caption(&text))
                .ok_or_else(|| CliError::io(input, "no caption given or found in the response"))?;
            let (layout, report) = parse_response(&text, &caption, &opts).map_err(|e| CliError::io(input, e))?;
            let out = match (&a.out, &a.out_dir) {
                (Some(o), _) => Some(o.clone()),
                (None, Some(dir)) => {
                    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Some(dir.join(format!("{stem}.layout.json")))
                }
                (None, None) => None,
            };
            if let Some(path) = &out {
                write_json(path, &layout)?;
            }
            Ok(json!({
                "input": input,
                "caption": caption,
                "entries": layout.entries.len(),
                "boxes": layout.entries.iter().map(|e| e.boxes.len()).collect::<Vec<_>>(),
                "parse": report,
                "out": out,
                "layout": if out.is_none() { serde_json::to_value(&layout).map_err(CliError::domain)? } else { Value::Null },
            }))
        })
        .collect::<Result<_, _>>()?;
    Ok(json!({ "command": "layout parse", "layouts": results }))
}

fn layout_validate(a: ValidateArgs) -> Result<Outcome, CliError> {
    let results: Vec<(bool, Value)> = a
        .inputs
        .par_iter()
        .map(|input| -> Result<(bool, Value), CliError> {
            let report = validate_layout(&read_layout(input)?);
            let ok = report.is_valid();
            Ok((ok, json!({ "input": input, "valid": ok, "violations": report.violations })))
        })
        .collect::<Result<_, _>>()?;
    let valid = results.iter().all(|r| r.0);
    Ok(Outcome {
        summary: json!({
            "command": "layout validate",
            "valid": valid,
            "results": results.into_iter().map(|r| r.1).collect::<Vec<_>>(),
        }),
        failed: !valid,
    })
}

fn bind(layout_path: &Path, caption: Option<&str>, tokens: Option<&Path>) -> Result<BoundLayout, CliError> {
    let layout = read_layout(layout_path)?;
    let caption = caption.map(str::to_string).unwrap_or_else(|| layout.caption.clone());
    let bound = match tokens {
        Some(path) => {
            let seq = TokenSeq::from_external_json(&read(path)?, &caption).map_err(|e| CliError::io(path, e))?;
            bind_with_tokens(&layout, &caption, seq)
        }
        None => bind_layout(&layout, &caption, LEXICAL_TOKENIZER),
    };
    bound.map_err(|e| CliError::io(layout_path, e))
}

fn bind_args(b: &BindArgs) -> Result<BoundLayout, CliError> {
    bind(&b.layout, b.caption.as_deref(), b.tokens.as_deref())
}

fn cross_file(p: usize) -> String {
    format!("cross_p{p}.lmsk")
}

fn self_file(p: usize) -> String {
    format!("self_p{p}.lmsk")
}

fn mask_compile(a: CompileArgs, cfg: &RunConfig) -> Result<Value, CliError> {
    let bound = bind_args(&a.bind)?;
    let schedule = ResolutionSchedule {
        cross: a.p.unwrap_or_else(|| cfg.schedule.cross.clone()),
        self_attn: a.self_p.unwrap_or_else(|| cfg.schedule.self_attn.clone()),
    };
    let pyramid = compile_pyramid(&bound, &schedule).map_err(CliError::domain)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let mut cross = Vec::new();
    for (&p, mask) in &pyramid.cross {
        let path = a.out_dir.join(cross_file(p));
        write_mask(&path, &AnyMask::Cross(mask.clone())).map_err(|e| CliError::io(&path, e))?;
        cross.push(json!({ "p": p, "file": path, "ones": mask.count_ones(), "fallback_cells": mask.fallback_cells() }));
    }
    let mut self_attn = Vec::new();
    for (&p, mask) in &pyramid.self_attn {
        let path = a.out_dir.join(self_file(p));
        write_mask(&path, &AnyMask::SelfAttn(mask.clone())).map_err(|e| CliError::io(&path, e))?;
        self_attn.push(json!({ "p": p, "file": path, "ones": mask.bits().count_ones() }));
    }
    Ok(json!({
        "command": "mask compile",
        "tokens": bound.token_count(),
        "objects": bound.object_count(),
        "cross": cross,
        "self": self_attn,
    }))
}

/// Mismatching `(cross, self)` counts for one bound layout at resolution `p`.
fn check(bound: &BoundLayout, p: usize) -> Result<(usize, usize), CliError> {
    let cross = compile_cross_mask(bound, p).map_err(CliError::domain)? != cross_mask_oracle(bound, p).map_err(CliError::domain)?;
    let selfm = compile_self_mask(bound, p).map_err(CliError::domain)? != self_mask_oracle(bound, p).map_err(CliError::domain)?;
    Ok((usize::from(cross), usize::from(selfm)))
}

fn mask_verify(a: VerifyArgs, cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (summary, mismatches) = if let Some(layout) = &a.layout {
        let bound = bind(layout, a.caption.as_deref(), a.tokens.as_deref())?;
        let resolutions = a.p.clone().unwrap_or_else(|| {
            let mut all: Vec<usize> = cfg.schedule.cross.iter().chain(&cfg.schedule.self_attn).copied().collect();
            all.sort_unstable();
            all.dedup();
            all
        });
        let mut mismatches = 0;
        let mut checked = 0;
        for &p in &resolutions {
            let (c, s) = check(&bound, p)?;
            mismatches += c + s;
            checked += 2;
        }
        let mut files = 0;
        if let Some(dir) = &a.masks_dir {
            for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
                let path = entry.map_err(|e| CliError::io(dir, e))?.path();
                if path.extension().is_none_or(|x| x != "lmsk") {
                    continue;
                }
                let matches = match read_mask(&path).map_err(|e| CliError::io(&path, e))? {
                    AnyMask::Cross(m) => m == cross_mask_oracle(&bound, m.resolution()).map_err(CliError::domain)?,
                    AnyMask::SelfAttn(m) => m == self_mask_oracle(&bound, m.resolution()).map_err(CliError::domain)?,
                };
                mismatches += usize::from(!matches);
                files += 1;
                checked += 1;
            }
        }
        (
            json!({
                "command": "mask verify",
                "mode": "layout",
                "resolutions": resolutions,
                "files": files,
                "checked": checked,
                "mismatches": mismatches,
            }),
            mismatches,
        )
    } else {
        let resolutions = a.p.clone().unwrap_or_else(|| vec![2, 4, 8, 16]);
        if resolutions.contains(&0) {
            return Err(CliError::Domain("resolutions must be positive".into()));
        }
        let counts: Vec<(usize, usize)> = (0..a.cases)
            .into_par_iter()
            .map(|case| {
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                rng.set_stream(case as u64);
                let bound = random_bound_layout(&mut rng);
                resolutions.iter().try_fold((0, 0), |acc, &p| {
                    let (c, s) = check(&bound, p)?;
                    Ok::<_, CliError>((acc.0 + c, acc.1 + s))
                })
            })
            .collect::<Result<_, _>>()?;
        let cross: usize = counts.iter().map(|c| c.0).sum();
        let selfm: usize = counts.iter().map(|c| c.1).sum();
        (
            json!({
                "command": "mask verify",
                "mode": "random",
                "seed": a.seed,
                "cases": a.cases,
                "resolutions": resolutions,
                "checked": 2 * a.cases * resolutions.len(),
                "cross_mismatches": cross,
                "self_mismatches": selfm,
                "mismatches": cross + selfm,
            }),
            cross + selfm,
        )
    };
    Ok(Outcome {
        summary,
        failed: mismatches > 0,
    })
}

fn attn_demo(a: DemoArgs, cfg: &RunConfig) -> Result<Value, CliError> {
    let denoise = DenoiseConfig {
        seed: a.seed.unwrap_or(cfg.denoise.seed),
        resolution: a.p.unwrap_or(cfg.denoise.resolution),
        channels: a.channels.unwrap_or(cfg.denoise.channels),
        text_dim: a.text_dim.unwrap_or(cfg.denoise.text_dim),
        ..cfg.denoise
    };
    let gate = GateConfig::new(
        a.steps.unwrap_or(cfg.gate.total_steps),
        a.fraction.unwrap_or(cfg.gate.laca_fraction),
    )
    .map_err(CliError::domain)?;
    let guidance = GuidanceConfig {
        variant: a.variant.unwrap_or(cfg.guidance.variant),
        g1: a.g1.unwrap_or(cfg.guidance.g1),
        g2: a.g2.unwrap_or(cfg.guidance.g2),
        g: a.g.unwrap_or(cfg.guidance.g),
    };
    let bound = match &a.layout {
        Some(path) => bind(path, None, None)?,
        None => {
            let example = &ExampleStore::bundled().examples[0];
            let layout = example.answer_layout();
            bind_layout(&layout, &layout.caption, LEXICAL_TOKENIZER).map_err(CliError::domain)?
        }
    };
    let weights = match &a.weights {
        Some(dir) => load_weights(dir).map_err(|e| CliError::io(dir, e))?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(denoise.seed ^ 0x5eed);
            BlockWeights::random(denoise.channels, denoise.text_dim, a.inner, a.heads, &mut rng).with_gains(a.gain)
        }
    };
    if let Some(dir) = &a.save_weights {
        save_weights(dir, &weights).map_err(|e| CliError::io(dir, e))?;
    }
    let p = denoise.resolution;
    let cross = compile_cross_mask(&bound, p).map_err(CliError::domain)?;
    let self_mask = if a.no_self_mask {
        None
    } else {
        Some(compile_self_mask(&bound, p).map_err(CliError::domain)?)
    };
    let masks = Some(BlockMasks {
        cross: &cross,
        self_attn: self_mask.as_ref(),
    });
    let trace = demo_denoise(&denoise, &bound, masks, &weights, &guidance, &gate).map_err(CliError::domain)?;
    if let Some(dir) = &a.out_dir {
        save_trajectory(dir, &trace.trajectory).map_err(|e| CliError::io(dir, e))?;
    }
    let last = trace.trajectory.last().expect("trajectory holds the initial latent");
    let rms = (last.values().mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
    Ok(json!({
        "command": "attn demo",
        "caption": bound.layout.caption,
        "seed": denoise.seed,
        "resolution": p,
        "guidance": guidance,
        "gate": gate,
        "stats": trace.stats,
        "final_rms": rms,
        "out_dir": a.out_dir,
    }))
}

fn read_records<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<Vec<T>, CliError> {
    read_jsonl(path).map_err(CliError::domain)
}

fn finish(mut report: EvalReport, path: Option<&Path>, command: &str) -> Result<Value, CliError> {
    if let Some(path) = path {
        write_json(path, &report)?;
    }
    report.per_item.clear();
    let mut summary = serde_json::to_value(&report).map_err(CliError::domain)?;
    summary["command"] = json!(command);
    summary.as_object_mut().map(|m| m.remove("per_item"));
    Ok(summary)
}

fn eval_miou(a: PairsArgs) -> Result<Value, CliError> {
    let pairs: Vec<LayoutPair> = read_records(&a.pairs)?;
    if pairs.is_empty() {
        return Err(CliError::Domain("empty corpus".into()));
    }
    let per_item: Vec<ItemRecord> = pairs
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            let r = layout_miou(&pair.gt, &pair.generated);
            ItemRecord {
                index,
                id: pair.id.clone(),
                value: r.miou,
                flipped: Some(r.flipped),
                empty_comparison: Some(r.empty_comparison),
            }
        })
        .collect();
    let mean = per_item.iter().map(|r| r.value).sum::<f64>() / per_item.len() as f64;
    let report = EvalReport {
        miou: Some(mean),
        per_item,
        ..Default::default()
    };
    let empty = report.per_item.iter().filter(|r| r.empty_comparison == Some(true)).count();
    let mut summary = finish(report, a.report.as_deref(), "eval miou")?;
    summary["items"] = json!(pairs.len());
    summary["empty_comparisons"] = json!(empty);
    Ok(summary)
}

fn eval_hitrate(a: PairsArgs) -> Result<Value, CliError> {
    let pairs: Vec<LayoutPair> = read_records(&a.pairs)?;
    let corpus: Vec<(Layout, Layout)> = pairs.iter().map(|p| (p.gt.clone(), p.generated.clone())).collect();
    let rate = hit_rate(&corpus).map_err(CliError::domain)?;
    let per_item = pairs
        .par_iter()
        .enumerate()
        .map(|(index, p)| {
            let m = relaxed_match(&p.gt, &p.generated);
            let total = p.gt.entries.len();
            ItemRecord {
                index,
                id: p.id.clone(),
                value: if total == 0 { 0.0 } else { (total - m.unmatched_gt.len()) as f64 / total as f64 },
                flipped: None,
                empty_comparison: None,
            }
        })
        .collect();
    let report = EvalReport {
        hit_rate: Some(rate),
        per_item,
        ..Default::default()
    };
    let mut summary = finish(report, a.report.as_deref(), "eval hitrate")?;
    summary["items"] = json!(pairs.len());
    Ok(summary)
}

fn threshold(flag: Option<f64>, cfg: &RunConfig) -> Result<f64, CliError> {
    let t = flag.unwrap_or(cfg.eval.score_threshold);
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(CliError::Domain(format!("threshold {t} outside [0, 1]")))
    }
}

fn eval_glip(a: GlipArgs, cfg: &RunConfig) -> Result<Value, CliError> {
    let t = threshold(a.threshold, cfg)?;
    let entities: Vec<EntityList> = read_records(&a.entities)?;
    let detections: Vec<DetectionRecord> = read_records(&a.detections)?;
    let rate = glip_rate(&entities, &detections, t).map_err(CliError::domain)?;
    let per_item = glip_counts(&entities, &detections, t)
        .map_err(CliError::domain)?
        .into_iter()
        .zip(&entities)
        .enumerate()
        .map(|(index, ((d, n), e))| ItemRecord {
            index,
            id: Some(e.image_id.clone()),
            value: if n == 0 { 0.0 } else { d as f64 / n as f64 },
            flipped: None,
            empty_comparison: None,
        })
        .collect();
    let report = EvalReport {
        glip_rate: Some(rate.rate),
        per_item,
        ..Default::default()
    };
    let mut summary = finish(report, a.report.as_deref(), "eval gliprate")?;
    summary["detected"] = json!(rate.detected);
    summary["total"] = json!(rate.total);
    summary["threshold"] = json!(t);
    Ok(summary)
}

fn eval_count(a: CountArgs, cfg: &RunConfig) -> Result<Value, CliError> {
    let t = threshold(a.threshold, cfg)?;
    let specs: Vec<CountCaseSpec> = read_records(&a.cases)?;
    let detections: Vec<DetectionRecord> = read_records(&a.detections)?;
    for d in &detections {
        d.validate().map_err(CliError::domain)?;
    }
    let cases = join_count_cases(&specs, &detections).map_err(CliError::domain)?;
    let stats = counting_accuracy(&cases, t);
    let per_item = cases
        .iter()
        .zip(&specs)
        .enumerate()
        .map(|(index, (c, s))| ItemRecord {
            index,
            id: Some(s.image_id.clone()),
            value: if c.is_correct(t) { 1.0 } else { 0.0 },
            flipped: None,
            empty_comparison: None,
        })
        .collect();
    let report = EvalReport {
        counting_accuracy: stats.iter().map(|(n, s)| (*n, s.accuracy)).collect(),
        per_item,
        ..Default::default()
    };
    let mut summary = finish(report, a.report.as_deref(), "eval count")?;
    summary["cases"] = json!(stats);
    summary["threshold"] = json!(t);
    Ok(summary)
}
