//! Verb implementations.
//!
//! Every verb resolves its configuration first (rejecting unknown sections,
//! keys, or malformed values before any side effect), synthesizes the corpus
//! in memory from the `[dataset]` section, runs the corresponding library
//! operation, and writes its artifacts plus `manifest-<verb>.txt` under
//! `run.output_dir`. Inputs — run files and checkpoints — are never written.

use std::fs;
use std::path::{Path, PathBuf};

use dcap_core::analysis::{
    descriptor_norm_stats, export_attention_map, mean_neighbor_consistency, neighbor_consistency,
};
use dcap_core::backbone::FeatureMap;
use dcap_core::episodes::{
    consistent_eval_set, episode_manifest, export_image_dir, synth_generate, Dataset, Split,
};
use dcap_core::heads::Pooling;
use dcap_core::pipeline::{
    ablate, cross_domain_eval, evaluate, feature_maps, meta_finetune, pooling_tag, pretrain,
    Checkpoint, EvalReport, Pretraining, Stage,
};
use dcap_core::selfcheck::{gradient_battery, protocol_battery, GRADIENT_SEEDS};

use crate::config::{self, parse_override, parse_pairs, Resolved};
use crate::manifest::Manifest;
use crate::{Cli, CliError, Command, CommonArgs};

fn runtime(detail: impl Into<String>) -> CliError {
    CliError::Runtime { detail: detail.into() }
}

fn config_error(detail: impl Into<String>) -> CliError {
    CliError::Config { detail: detail.into() }
}

struct Setup {
    resolved: Resolved,
    manifest: Manifest,
    out: PathBuf,
    threads: usize,
}

fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("DCAP_THREADS") {
        Ok(value) => value
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| config_error(format!("DCAP_THREADS: `{value}` is not a positive integer"))),
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(config_error(format!("DCAP_THREADS: {e}"))),
    }
}

fn setup(verb: &'static str, common: &CommonArgs) -> Result<Setup, CliError> {
    let file_pairs = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    let mut override_texts = common.set.clone();
    if let Some(seed) = common.seed {
        override_texts.push(format!("run.seed={seed}"));
    }
    let overrides = override_texts
        .iter()
        .map(|text| parse_override(text))
        .collect::<Result<Vec<_>, _>>()?;
    let resolved = config::resolve(&file_pairs, &overrides)?;
    let source = common
        .config
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "builtin".to_string());
    let mut manifest = Manifest::new(verb, &source);
    for text in &override_texts {
        manifest.record_override(text);
    }
    manifest.record_resolved(&config::render(&resolved));
    let out = resolved.run.output_dir.clone();
    Ok(Setup { resolved, manifest, out, threads: threads_from_env()? })
}

fn synthesize(resolved: &Resolved) -> Result<Dataset, CliError> {
    synth_generate(&resolved.dataset).map_err(|e| config_error(format!("dataset: {e}")))
}

fn parse_split(tag: &str) -> Result<Split, CliError> {
    Split::ALL
        .into_iter()
        .find(|s| s.dir_name() == tag)
        .ok_or_else(|| config_error(format!("split `{tag}` is not meta-train, meta-val, or meta-test")))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Stage-aware variant label, e.g. `metatrained-attpool` or the no-finetune
/// `pretrained-gap`.
fn variant_of(ckpt: &Checkpoint) -> String {
    let pooling = match ckpt.stage {
        Stage::Pretrained => Pooling::Gap,
        Stage::Metatrained => ckpt.pooling,
    };
    format!("{}-{}", ckpt.stage.tag(), pooling_tag(pooling))
}

fn report_csv(report: &EvalReport, seed: u64) -> String {
    format!("{}\n{}\n", EvalReport::csv_header(), report.csv_line(seed))
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData { common } => synth_data(&common),
        Command::Pretrain { common } => run_pretrain(&common),
        Command::Metatrain { common, from } => run_metatrain(&common, from.as_deref()),
        Command::Eval { common, ckpt, split } => run_eval(&common, &ckpt, &split),
        Command::Ablate { common } => run_ablate(&common),
        Command::Xdomain { common, ckpt } => run_xdomain(&common, &ckpt),
        Command::Analyze { common, ckpt, images, attention } => {
            run_analyze(&common, &ckpt, images, attention)
        }
        Command::Selftest { common, episodes } => run_selftest(&common, episodes),
    }
}

fn synth_data(common: &CommonArgs) -> Result<(), CliError> {
    let Setup { resolved, mut manifest, out, .. } = setup("synth-data", common)?;
    let data = synthesize(&resolved)?;
    let root = out.join("dataset");
    export_image_dir(&data, &root).map_err(|e| runtime(format!("{}: {e}", root.display())))?;
    manifest.record_tree(&out, "dataset")?;
    manifest.record_metric("images", data.len());
    manifest.finish(&out)?;
    println!("wrote {} images under {}", data.len(), root.display());
    Ok(())
}

fn run_pretrain(common: &CommonArgs) -> Result<(), CliError> {
    let Setup { resolved, mut manifest, out, .. } = setup("pretrain", common)?;
    let data = synthesize(&resolved)?;
    let outcome = pretrain(&data, &resolved.run)?;
    let name = format!("pretrained-{}.ckpt", resolved.run.pretraining.tag());
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    outcome.checkpoint.save(&out.join(&name))?;
    manifest.record_file(&out, &name)?;
    let mut history = String::from("epoch,lr,train_loss,holdout_accuracy\n");
    for epoch in &outcome.epochs {
        history.push_str(&format!(
            "{},{:?},{:?},{:?}\n",
            epoch.epoch, epoch.lr, epoch.train_loss, epoch.holdout_accuracy
        ));
    }
    manifest.write_output(&out, "pretrain-history.csv", history.as_bytes())?;
    let best = &outcome.epochs[outcome.best_epoch];
    manifest.record_metric("best_epoch", outcome.best_epoch);
    manifest.record_metric("best_holdout_accuracy", format!("{:?}", best.holdout_accuracy));
    manifest.finish(&out)?;
    println!(
        "pre-trained {} epochs; best holdout accuracy {:.4} at epoch {}",
        outcome.epochs.len(),
        best.holdout_accuracy,
        outcome.best_epoch
    );
    Ok(())
}

fn run_metatrain(common: &CommonArgs, from: Option<&Path>) -> Result<(), CliError> {
    let Setup { resolved, mut manifest, out, .. } = setup("metatrain", common)?;
    let start = match from {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    match (&start, resolved.run.pretraining) {
        (None, Pretraining::None) | (Some(_), Pretraining::Gap) | (Some(_), Pretraining::Dense) => {}
        (None, _) => {
            return Err(config_error(
                "metatrain requires --from unless run.pretraining = zero",
            ))
        }
        (Some(_), Pretraining::None) => {
            return Err(config_error(
                "--from contradicts run.pretraining = zero",
            ))
        }
    }
    let data = synthesize(&resolved)?;
    let outcome = meta_finetune(&data, start.as_ref(), &resolved.run)?;
    let name = format!(
        "metatrained-{}-{}.ckpt",
        resolved.run.pretraining.tag(),
        pooling_tag(resolved.run.pooling)
    );
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    outcome.checkpoint.save(&out.join(&name))?;
    manifest.record_file(&out, &name)?;
    let mut history = String::from("batch,lr,loss\n");
    for batch in &outcome.batches {
        history.push_str(&format!("{},{:?},{:?}\n", batch.batch, batch.lr, batch.loss));
    }
    manifest.write_output(&out, "meta-history.csv", history.as_bytes())?;
    let mut validation = String::from("batch,accuracy\n");
    for (batch, accuracy) in &outcome.validations {
        validation.push_str(&format!("{batch},{accuracy:?}\n"));
    }
    manifest.write_output(&out, "meta-validation.csv", validation.as_bytes())?;
    let best = outcome
        .validations
        .iter()
        .find(|(batch, _)| *batch == outcome.best_batch)
        .map(|&(_, accuracy)| accuracy)
        .unwrap_or(0.0);
    manifest.record_metric("best_batch", outcome.best_batch);
    manifest.record_metric("best_validation_accuracy", format!("{best:?}"));
    manifest.finish(&out)?;
    println!(
        "meta-finetuned {} batches; best validation accuracy {:.4} at batch {}",
        outcome.batches.len(),
        best,
        outcome.best_batch
    );
    Ok(())
}

fn run_eval(common: &CommonArgs, ckpt_path: &Path, split_tag: &str) -> Result<(), CliError> {
    let Setup { resolved, mut manifest, out, threads } = setup("eval", common)?;
    let split = parse_split(split_tag)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = synthesize(&resolved)?;
    let variant = variant_of(&ckpt);
    let report = evaluate(&data, &ckpt, split, &resolved.run.eval, &variant, threads)?;
    manifest.write_output(
        &out,
        &format!("eval-{split_tag}.csv"),
        report_csv(&report, resolved.run.seed).as_bytes(),
    )?;
    let eval = &resolved.run.eval;
    let episodes =
        consistent_eval_set(&data, split, eval.way, eval.shot, eval.queries, eval.seed, eval.episodes)
            .map_err(|e| runtime(e.to_string()))?;
    manifest.write_output(
        &out,
        &format!("episodes-{split_tag}.txt"),
        episode_manifest(&episodes).as_bytes(),
    )?;
    manifest.record_metric("mean", format!("{:?}", report.mean));
    manifest.record_metric("ci_half_width", format!("{:?}", report.half_width));
    manifest.finish(&out)?;
    println!(
        "{variant} on {split_tag}: {:.4} ± {:.4} over {} episodes",
        report.mean,
        report.half_width,
        report.count()
    );
    Ok(())
}

fn run_ablate(common: &CommonArgs) -> Result<(), CliError> {
    let Setup { resolved, mut manifest, out, threads } = setup("ablate", common)?;
    let data = synthesize(&resolved)?;
    let outcome = ablate(&data, &resolved.run, threads)?;
    manifest.write_output(
        &out,
        "ablation-grid.csv",
        outcome.grid_csv(resolved.run.seed).as_bytes(),
    )?;
    let text = outcome.grid_text();
    manifest.write_output(&out, "ablation-grid.txt", text.as_bytes())?;
    manifest.write_output(&out, "episodes-eval.txt", outcome.eval_manifest.as_bytes())?;
    for cell in &outcome.cells {
        manifest.record_metric(
            &format!("{}-{}", cell.pretraining.tag(), pooling_tag(cell.pooling)),
            format!("{:?}", cell.report.mean),
        );
    }
    manifest.finish(&out)?;
    print!("{text}");
    Ok(())
}

fn run_xdomain(common: &CommonArgs, ckpt_path: &Path) -> Result<(), CliError> {
    let Setup { resolved, mut manifest, out, threads } = setup("xdomain", common)?;
    let target_spec = resolved
        .target
        .as_ref()
        .ok_or_else(|| config_error("xdomain requires a [target] section"))?;
    let target =
        synth_generate(target_spec).map_err(|e| config_error(format!("target: {e}")))?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let variant = format!("xdomain-{}", variant_of(&ckpt));
    let report = cross_domain_eval(&ckpt, &target, &resolved.run.eval, &variant, threads)?;
    manifest.write_output(
        &out,
        "xdomain.csv",
        report_csv(&report, resolved.run.seed).as_bytes(),
    )?;
    manifest.record_metric("mean", format!("{:?}", report.mean));
    manifest.record_metric("ci_half_width", format!("{:?}", report.half_width));
    manifest.finish(&out)?;
    println!(
        "{variant}: {:.4} ± {:.4} over {} episodes",
        report.mean,
        report.half_width,
        report.count()
    );
    Ok(())
}

/// Deterministic image pick: round-robin over the split's classes in
/// ascending order.
fn round_robin_images(data: &Dataset, split: Split, count: usize) -> Vec<usize> {
    let classes = data.classes_in(split);
    let per_class: Vec<&[usize]> = classes.iter().map(|&c| data.images_of(c)).collect();
    let mut picked = Vec::new();
    let longest = per_class.iter().map(|images| images.len()).max().unwrap_or(0);
    'outer: for rank in 0..longest {
        for images in &per_class {
            if rank < images.len() {
                picked.push(images[rank]);
                if picked.len() == count {
                    break 'outer;
                }
            }
        }
    }
    picked
}

fn run_analyze(
    common: &CommonArgs,
    ckpt_path: &Path,
    images: usize,
    attention: usize,
) -> Result<(), CliError> {
    let Setup { resolved, mut manifest, out, threads } = setup("analyze", common)?;
    if images == 0 {
        return Err(config_error("--images must be at least 1"));
    }
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = synthesize(&resolved)?;
    let indices = round_robin_images(&data, Split::MetaTest, images);
    let maps = feature_maps(&ckpt, &data, &indices, threads)?;
    let mut rows = String::from("image,class,neighbor_consistency,norm_mean,norm_stddev\n");
    let mut ordered: Vec<&FeatureMap<f32>> = Vec::new();
    for &index in &indices {
        let map = &maps[&index];
        ordered.push(map);
        let consistency = neighbor_consistency(map).map_err(|e| runtime(e.to_string()))?;
        let stats = descriptor_norm_stats(map);
        rows.push_str(&format!(
            "{index},{},{consistency:?},{:?},{:?}\n",
            data.image(index).class,
            stats.mean,
            stats.stddev
        ));
    }
    let maps_owned: Vec<FeatureMap<f32>> = ordered.iter().map(|&m| m.clone()).collect();
    let mean_consistency =
        mean_neighbor_consistency(&maps_owned).map_err(|e| runtime(e.to_string()))?;
    manifest.write_output(&out, "consistency.csv", rows.as_bytes())?;
    manifest.record_metric("mean_neighbor_consistency", format!("{mean_consistency:?}"));
    let mut exported = 0usize;
    if ckpt.has_regressor() && attention > 0 {
        let (_, _, regressor) = ckpt.build_model()?;
        let regressor = regressor.expect("checkpoint with regressor tensors builds one");
        for &index in indices.iter().take(attention) {
            let map = &maps[&index];
            let att = regressor
                .attention_scores(map)
                .map_err(|e| runtime(e.to_string()))?;
            let name = format!("attention/img_{index:05}.pgm");
            let path = out.join(&name);
            fs::create_dir_all(path.parent().expect("attention path has a parent"))
                .map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            export_attention_map(&att, map.h, map.w, data.extent(), &path)
                .map_err(|e| runtime(e.to_string()))?;
            manifest.record_file(&out, &name)?;
            manifest.record_file(&out, &format!("attention/img_{index:05}.csv"))?;
            exported += 1;
        }
    }
    manifest.record_metric("attention_maps", exported);
    manifest.finish(&out)?;
    println!(
        "analyzed {} images: mean neighbor consistency {:.4}, {} attention maps",
        indices.len(),
        mean_consistency,
        exported
    );
    Ok(())
}

fn run_selftest(common: &CommonArgs, episodes: usize) -> Result<(), CliError> {
    let Setup { resolved, mut manifest, out, .. } = setup("selftest", common)?;
    if episodes == 0 {
        return Err(config_error("--episodes must be at least 1"));
    }
    let gradient = gradient_battery(&GRADIENT_SEEDS).map_err(|e| runtime(e.to_string()))?;
    let protocol =
        protocol_battery(resolved.run.seed, episodes).map_err(|e| runtime(e.to_string()))?;
    let text = format!("{}{}", gradient.render(), protocol.render());
    print!("{text}");
    manifest.write_output(&out, "selftest.txt", text.as_bytes())?;
    let failed = gradient.items.iter().chain(&protocol.items).filter(|i| !i.passed).count();
    let total = gradient.items.len() + protocol.items.len();
    manifest.record_metric("passed", total - failed);
    manifest.record_metric("failed", failed);
    manifest.finish(&out)?;
    if failed > 0 {
        return Err(CliError::Selftest { detail: format!("{failed} of {total} items failed") });
    }
    println!("all {total} items passed");
    Ok(())
}
