//! Run-file parsing and resolution.
//!
//! Run files are line-oriented: `[section]` headers group plain `key = value`
//! pairs; blank lines and lines starting with `#` are ignored. Every section
//! and key is checked against the schema before any command side effect, and
//! dotted-key overrides (`section.key=value`) are applied after the file in
//! the order given. Resolution starts from the desk-scale defaults, so an
//! empty file is a valid, complete configuration.

use std::path::PathBuf;

use dcap_core::backbone::{BackboneConfig, Family};
use dcap_core::episodes::SynthSpec;
use dcap_core::heads::Pooling;
use dcap_core::pipeline::{pooling_tag, Pretraining, RunConfig};

use crate::CliError;

/// Everything a command needs, resolved from defaults, file, and overrides.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub dataset: SynthSpec,
    /// Second corpus for cross-domain evaluation; present once any
    /// `[target]` key is set.
    pub target: Option<SynthSpec>,
    pub run: RunConfig,
}

fn bad(detail: String) -> CliError {
    CliError::Config { detail }
}

/// Splits a run file into `(section, key, value)` triples, in order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, String)>, CliError> {
    let mut section = String::new();
    let mut pairs = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = index + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(body) = line.strip_prefix('[') {
            let Some(name) = body.strip_suffix(']') else {
                return Err(bad(format!("line {lineno}: unterminated section header")));
            };
            section = name.trim().to_string();
            if section.is_empty() {
                return Err(bad(format!("line {lineno}: empty section name")));
            }
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(bad(format!("line {lineno}: expected `key = value`")));
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        if key.is_empty() {
            return Err(bad(format!("line {lineno}: empty key")));
        }
        if section.is_empty() {
            return Err(bad(format!("line {lineno}: key before any [section]")));
        }
        pairs.push((section.clone(), key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Splits an override of the form `section.key=value`.
pub fn parse_override(text: &str) -> Result<(String, String, String), CliError> {
    let Some(eq) = text.find('=') else {
        return Err(bad(format!("override `{text}`: expected section.key=value")));
    };
    let (path, value) = (text[..eq].trim(), text[eq + 1..].trim());
    let Some(dot) = path.find('.') else {
        return Err(bad(format!("override `{text}`: key must be section.key")));
    };
    let (section, key) = (path[..dot].trim(), path[dot + 1..].trim());
    if section.is_empty() || key.is_empty() {
        return Err(bad(format!("override `{text}`: key must be section.key")));
    }
    Ok((section.to_string(), key.to_string(), value.to_string()))
}

fn parse_usize(section: &str, key: &str, value: &str) -> Result<usize, CliError> {
    value
        .parse()
        .map_err(|_| bad(format!("{section}.{key}: `{value}` is not a non-negative integer")))
}

fn parse_u64(section: &str, key: &str, value: &str) -> Result<u64, CliError> {
    value
        .parse()
        .map_err(|_| bad(format!("{section}.{key}: `{value}` is not a non-negative integer")))
}

fn parse_f64(section: &str, key: &str, value: &str) -> Result<f64, CliError> {
    value
        .parse()
        .map_err(|_| bad(format!("{section}.{key}: `{value}` is not a number")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(format!("{section}.{key}: `{value}` is not `true` or `false`"))),
    }
}

fn parse_usize_list(section: &str, key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_usize(section, key, part.trim()))
        .collect()
}

fn parse_usize3(section: &str, key: &str, value: &str) -> Result<[usize; 3], CliError> {
    let list = parse_usize_list(section, key, value)?;
    list.try_into()
        .map_err(|_| bad(format!("{section}.{key}: expected three comma-separated values")))
}

fn parse_f64_3(section: &str, key: &str, value: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|part| parse_f64(section, key, part.trim()))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| bad(format!("{section}.{key}: expected three comma-separated values")))
}

fn apply_synth(spec: &mut SynthSpec, section: &str, key: &str, value: &str) -> Result<(), CliError> {
    match key {
        "classes" => spec.class_counts = parse_usize3(section, key, value)?,
        "images_per_class" => spec.images_per_class = parse_usize3(section, key, value)?,
        "extent" => spec.extent = parse_usize(section, key, value)?,
        "channels" => spec.channels = parse_usize(section, key, value)?,
        "regime_weights" => spec.regime_weights = parse_f64_3(section, key, value)?,
        "noise" => spec.noise = parse_f64(section, key, value)?,
        "vocab_start" => spec.vocab_start = parse_usize(section, key, value)?,
        "seed" => spec.seed = parse_u64(section, key, value)?,
        _ => return Err(bad(format!("unknown key {section}.{key}"))),
    }
    Ok(())
}

fn apply_backbone(cfg: &mut BackboneConfig, key: &str, value: &str) -> Result<(), CliError> {
    match key {
        "family" => {
            cfg.family = match value {
                "conv4" => Family::Conv4 { filters: [32; 4] },
                "resnet" => Family::Resnet { base_width: 16 },
                _ => return Err(bad(format!("backbone.family: `{value}` is not conv4 or resnet"))),
            }
        }
        "filters" => {
            let list = parse_usize_list("backbone", key, value)?;
            let filters: [usize; 4] = list
                .try_into()
                .map_err(|_| bad("backbone.filters: expected four comma-separated values".into()))?;
            match cfg.family {
                Family::Conv4 { .. } => cfg.family = Family::Conv4 { filters },
                Family::Resnet { .. } => {
                    return Err(bad("backbone.filters only applies to family conv4".into()))
                }
            }
        }
        "base_width" => {
            let width = parse_usize("backbone", key, value)?;
            match cfg.family {
                Family::Resnet { .. } => cfg.family = Family::Resnet { base_width: width },
                Family::Conv4 { .. } => {
                    return Err(bad("backbone.base_width only applies to family resnet".into()))
                }
            }
        }
        "input_size" => cfg.input_size = parse_usize("backbone", key, value)?,
        "channels_in" => cfg.channels_in = parse_usize("backbone", key, value)?,
        _ => return Err(bad(format!("unknown key backbone.{key}"))),
    }
    Ok(())
}

fn apply_run(run: &mut RunConfig, key: &str, value: &str) -> Result<(), CliError> {
    match key {
        "pooling" => {
            run.pooling = match value {
                "gap" => Pooling::Gap,
                "attpool" => Pooling::AttPool,
                _ => return Err(bad(format!("run.pooling: `{value}` is not gap or attpool"))),
            }
        }
        "pretraining" => {
            run.pretraining = match value {
                "zero" => Pretraining::None,
                "gap" => Pretraining::Gap,
                "dense" => Pretraining::Dense,
                _ => {
                    return Err(bad(format!(
                        "run.pretraining: `{value}` is not zero, gap, or dense"
                    )))
                }
            }
        }
        "momentum" => run.momentum = parse_f64("run", key, value)?,
        "nesterov" => run.nesterov = parse_bool("run", key, value)?,
        "weight_decay" => run.weight_decay = parse_f64("run", key, value)?,
        "seed" => run.seed = parse_u64("run", key, value)?,
        "output_dir" => run.output_dir = PathBuf::from(value),
        _ => return Err(bad(format!("unknown key run.{key}"))),
    }
    Ok(())
}

fn apply_pretrain(run: &mut RunConfig, key: &str, value: &str) -> Result<(), CliError> {
    let cfg = &mut run.pretrain;
    match key {
        "epochs" => cfg.epochs = parse_usize("pretrain", key, value)?,
        "milestones" => cfg.milestones = parse_usize_list("pretrain", key, value)?,
        "lr" => cfg.lr = parse_f64("pretrain", key, value)?,
        "batch_size" => cfg.batch_size = parse_usize("pretrain", key, value)?,
        "holdout_rate" => cfg.holdout_rate = parse_f64("pretrain", key, value)?,
        _ => return Err(bad(format!("unknown key pretrain.{key}"))),
    }
    Ok(())
}

fn apply_meta(run: &mut RunConfig, key: &str, value: &str) -> Result<(), CliError> {
    let cfg = &mut run.meta;
    match key {
        "batches" => cfg.batches = parse_usize("meta", key, value)?,
        "milestones" => cfg.milestones = parse_usize_list("meta", key, value)?,
        "backbone_lr" => cfg.backbone_lr = parse_f64("meta", key, value)?,
        "regressor_lr" => cfg.regressor_lr = parse_f64("meta", key, value)?,
        "way" => cfg.way = parse_usize("meta", key, value)?,
        "shot" => cfg.shot = parse_usize("meta", key, value)?,
        "queries" => cfg.queries = parse_usize("meta", key, value)?,
        "beta" => cfg.weights.beta = parse_f64("meta", key, value)?,
        "gamma" => cfg.weights.gamma = parse_f64("meta", key, value)?,
        "validation_interval" => cfg.validation_interval = parse_usize("meta", key, value)?,
        "validation_episodes" => cfg.validation_episodes = parse_usize("meta", key, value)?,
        _ => return Err(bad(format!("unknown key meta.{key}"))),
    }
    Ok(())
}

fn apply_eval(run: &mut RunConfig, key: &str, value: &str) -> Result<(), CliError> {
    let cfg = &mut run.eval;
    match key {
        "way" => cfg.way = parse_usize("eval", key, value)?,
        "shot" => cfg.shot = parse_usize("eval", key, value)?,
        "queries" => cfg.queries = parse_usize("eval", key, value)?,
        "episodes" => cfg.episodes = parse_usize("eval", key, value)?,
        "seed" => cfg.seed = parse_u64("eval", key, value)?,
        _ => return Err(bad(format!("unknown key eval.{key}"))),
    }
    Ok(())
}

fn apply(resolved: &mut Resolved, section: &str, key: &str, value: &str) -> Result<(), CliError> {
    match section {
        "dataset" => apply_synth(&mut resolved.dataset, section, key, value),
        "target" => {
            if resolved.target.is_none() {
                resolved.target = Some(resolved.dataset.clone());
            }
            apply_synth(resolved.target.as_mut().unwrap(), section, key, value)
        }
        "backbone" => apply_backbone(&mut resolved.run.backbone, key, value),
        "run" => apply_run(&mut resolved.run, key, value),
        "pretrain" => apply_pretrain(&mut resolved.run, key, value),
        "meta" => apply_meta(&mut resolved.run, key, value),
        "eval" => apply_eval(&mut resolved.run, key, value),
        _ => Err(bad(format!("unknown section [{section}]"))),
    }
}

/// Resolves the desk defaults, then the file pairs, then the overrides, and
/// validates the outcome.
pub fn resolve(
    file_pairs: &[(String, String, String)],
    overrides: &[(String, String, String)],
) -> Result<Resolved, CliError> {
    let mut resolved = Resolved {
        dataset: SynthSpec::desk(0),
        target: None,
        run: RunConfig::desk(0),
    };
    for (section, key, value) in file_pairs.iter().chain(overrides) {
        apply(&mut resolved, section, key, value)?;
    }
    if resolved.run.backbone.input_size != resolved.dataset.extent
        || resolved.run.backbone.channels_in != resolved.dataset.channels
    {
        return Err(bad(format!(
            "backbone geometry {}px ×{} does not match dataset {}px ×{}",
            resolved.run.backbone.input_size,
            resolved.run.backbone.channels_in,
            resolved.dataset.extent,
            resolved.dataset.channels
        )));
    }
    if let Some(target) = &resolved.target {
        if target.extent != resolved.dataset.extent || target.channels != resolved.dataset.channels
        {
            return Err(bad("target geometry must match the dataset geometry".into()));
        }
    }
    resolved.run.validate().map_err(|e| bad(e.to_string()))?;
    Ok(resolved)
}

fn push_synth(lines: &mut Vec<(String, String)>, section: &str, spec: &SynthSpec) {
    let mut push = |key: &str, value: String| lines.push((format!("{section}.{key}"), value));
    push("classes", join(spec.class_counts.iter()));
    push("images_per_class", join(spec.images_per_class.iter()));
    push("extent", spec.extent.to_string());
    push("channels", spec.channels.to_string());
    push(
        "regime_weights",
        spec.regime_weights.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>().join(","),
    );
    push("noise", format!("{:?}", spec.noise));
    push("vocab_start", spec.vocab_start.to_string());
    push("seed", spec.seed.to_string());
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical `section.key = value` listing of a resolved configuration, in
/// schema order, for the run manifest.
pub fn render(resolved: &Resolved) -> Vec<(String, String)> {
    let mut lines = Vec::new();
    push_synth(&mut lines, "dataset", &resolved.dataset);
    if let Some(target) = &resolved.target {
        push_synth(&mut lines, "target", target);
    }
    let run = &resolved.run;
    let mut push = |key: &str, value: String| lines.push((key.to_string(), value));
    match run.backbone.family {
        Family::Conv4 { filters } => {
            push("backbone.family", "conv4".into());
            push("backbone.filters", join(filters.iter()));
        }
        Family::Resnet { base_width } => {
            push("backbone.family", "resnet".into());
            push("backbone.base_width", base_width.to_string());
        }
    }
    push("backbone.input_size", run.backbone.input_size.to_string());
    push("backbone.channels_in", run.backbone.channels_in.to_string());
    push("run.pooling", pooling_tag(run.pooling).into());
    push("run.pretraining", run.pretraining.tag().into());
    push("run.momentum", format!("{:?}", run.momentum));
    push("run.nesterov", run.nesterov.to_string());
    push("run.weight_decay", format!("{:?}", run.weight_decay));
    push("run.seed", run.seed.to_string());
    push("run.output_dir", run.output_dir.display().to_string());
    push("pretrain.epochs", run.pretrain.epochs.to_string());
    push("pretrain.milestones", join(run.pretrain.milestones.iter()));
    push("pretrain.lr", format!("{:?}", run.pretrain.lr));
    push("pretrain.batch_size", run.pretrain.batch_size.to_string());
    push("pretrain.holdout_rate", format!("{:?}", run.pretrain.holdout_rate));
    push("meta.batches", run.meta.batches.to_string());
    push("meta.milestones", join(run.meta.milestones.iter()));
    push("meta.backbone_lr", format!("{:?}", run.meta.backbone_lr));
    push("meta.regressor_lr", format!("{:?}", run.meta.regressor_lr));
    push("meta.way", run.meta.way.to_string());
    push("meta.shot", run.meta.shot.to_string());
    push("meta.queries", run.meta.queries.to_string());
    push("meta.beta", format!("{:?}", run.meta.weights.beta));
    push("meta.gamma", format!("{:?}", run.meta.weights.gamma));
    push("meta.validation_interval", run.meta.validation_interval.to_string());
    push("meta.validation_episodes", run.meta.validation_episodes.to_string());
    push("eval.way", run.eval.way.to_string());
    push("eval.shot", run.eval.shot.to_string());
    push("eval.queries", run.eval.queries.to_string());
    push("eval.episodes", run.eval.episodes.to_string());
    push("eval.seed", run.eval.seed.to_string());
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_desk_defaults() {
        let resolved = resolve(&[], &[]).unwrap();
        assert_eq!(resolved.dataset.class_counts, [20, 5, 5]);
        assert_eq!(resolved.run.eval.way, 5);
        assert!(resolved.target.is_none());
    }

    #[test]
    fn file_pairs_then_overrides_apply_in_order() {
        let pairs = parse_pairs(
            "# comment\n\n[run]\nseed = 7\npooling = gap\n[eval]\nepisodes = 12\n",
        )
        .unwrap();
        let overrides = [parse_override("run.seed=9").unwrap()];
        let resolved = resolve(&pairs, &overrides).unwrap();
        assert_eq!(resolved.run.seed, 9);
        assert_eq!(resolved.run.pooling, Pooling::Gap);
        assert_eq!(resolved.run.eval.episodes, 12);
    }

    #[test]
    fn unknown_sections_and_keys_are_rejected() {
        let pairs = parse_pairs("[runs]\nseed = 1\n").unwrap();
        assert!(matches!(resolve(&pairs, &[]), Err(CliError::Config { .. })));
        let pairs = parse_pairs("[run]\nseeed = 1\n").unwrap();
        assert!(matches!(resolve(&pairs, &[]), Err(CliError::Config { .. })));
        assert!(parse_pairs("[run\nseed = 1\n").is_err());
        assert!(parse_pairs("seed = 1\n").is_err());
        assert!(parse_pairs("[run]\nnot a pair\n").is_err());
        assert!(parse_override("run-seed=1").is_err());
    }

    #[test]
    fn geometry_mismatch_is_a_config_error() {
        let pairs = parse_pairs("[dataset]\nextent = 32\n").unwrap();
        let err = resolve(&pairs, &[]).unwrap_err();
        let CliError::Config { detail } = err else { panic!("wrong error kind") };
        assert!(detail.contains("does not match"));
        let fixed = parse_pairs("[dataset]\nextent = 32\n[backbone]\ninput_size = 32\n").unwrap();
        assert!(resolve(&fixed, &[]).is_ok());
    }

    #[test]
    fn target_section_starts_from_dataset_values() {
        let pairs = parse_pairs(
            "[dataset]\nnoise = 0.05\n[target]\nvocab_start = 100\nseed = 3\n",
        )
        .unwrap();
        let resolved = resolve(&pairs, &[]).unwrap();
        let target = resolved.target.unwrap();
        assert_eq!(target.vocab_start, 100);
        assert_eq!(target.seed, 3);
        assert_eq!(target.noise, 0.05);
    }

    #[test]
    fn rendered_config_reparses_to_itself() {
        let pairs = parse_pairs("[run]\nseed = 4\n[target]\nvocab_start = 64\n").unwrap();
        let resolved = resolve(&pairs, &[]).unwrap();
        let rendered = render(&resolved);
        let text: String =
            rendered.iter().map(|(k, v)| format!("{}={}\n", k, v)).collect();
        let reparsed: Vec<(String, String, String)> = text
            .lines()
            .map(|line| {
                let (path, value) = line.split_once('=').unwrap();
                let (section, key) = path.split_once('.').unwrap();
                (section.to_string(), key.to_string(), value.to_string())
            })
            .collect();
        let round = resolve(&reparsed, &[]).unwrap();
        assert_eq!(render(&round), rendered);
    }
}
