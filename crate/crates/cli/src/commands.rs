use std::path::{Path, PathBuf};

use lexdebias::augmentation::{
    augment_synthetic, default_cwb_rules, enhance, select_counterbias_pool, stress_dataset, AugmentSource,
    EnhancementPlan,
};
use lexdebias::bias_audit::{
    compute_word_label_stats, extract_cwb_balanced, extract_wob_balanced, select_contradiction_words, wob_manifest,
    BalancedSetSpec, BiasKind,
};
use lexdebias::checkpoint::{load_model, save_model};
use lexdebias::config::RunConfig;
use lexdebias::corpus::{build_vocab, load_embeddings, load_pairs, CorpusFormat, Dataset};
use lexdebias::explain::{lime_explain, render_bars};
use lexdebias::model::{Model, ModelKind};
use lexdebias::synth::generate;
use lexdebias::train_eval::{evaluate, train, write_metrics_jsonl, EvalReport, HardSubsetRule};
use serde_json::json;

use crate::{
    AuditArgs, AugmentArgs, Cli, Command, EvalArgs, ExplainArgs, ExtractArgs, Failure, StressArgs, SynthArgs, TrainArgs,
};

type CmdResult = Result<(), Failure>;

struct Ctx {
    cfg: RunConfig,
    data_dir: Option<PathBuf>,
}

impl Ctx {
    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn load(&self, p: &Path) -> Result<Dataset, Failure> {
        let path = self.resolve(p);
        let (ds, stats) = load_pairs(&path, CorpusFormat::from_path(&path))?;
        if stats.skipped_no_consensus > 0 {
            log::info!(
                "{}: skipped {} records without a gold label",
                path.display(),
                stats.skipped_no_consensus
            );
        }
        Ok(ds)
    }

    /// The configured dataset (flags are already folded into the config).
    fn input(&self, configured: &Option<PathBuf>, what: &str) -> Result<Dataset, Failure> {
        let p = configured
            .as_ref()
            .ok_or_else(|| Failure::Usage(format!("no {what} dataset given (flag or [data] section)")))?;
        self.load(p)
    }

    fn digest(&self) -> String {
        self.cfg.digest()
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(lexdebias::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| lexdebias::Error::io(path, e).into())
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| lexdebias::Error::io(dir, e).into())
}

pub fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.command);
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        data_dir: cli.data_dir,
    };
    log::info!("run configuration sha256 {}", ctx.digest());
    match &cli.command {
        Command::Audit(a) => audit(&ctx, a),
        Command::ExtractBal(a) => extract(&ctx, a),
        Command::Augment(a) => augment(&ctx, a),
        Command::Stress(a) => stress(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Explain(a) => explain(&ctx, a),
        Command::SynthBench(a) => synth(&ctx, a),
    }
}

/// Folds command-line flags into the configuration so the digest covers them.
fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
        if let Some(v) = src {
            *dst = v.clone();
        }
    }
    match cmd {
        Command::Audit(a) => {
            set(&mut cfg.data.train, &a.train.clone().map(Some));
            set(&mut cfg.audit.min_count, &a.min_count);
            set(&mut cfg.audit.threshold, &a.threshold);
            set(&mut cfg.audit.top_k, &a.top_k);
        }
        Command::ExtractBal(a) => {
            set(&mut cfg.data.train, &a.train.clone().map(Some));
            set(&mut cfg.data.dev_matched, &a.dev.clone().map(Some));
            set(&mut cfg.extract.target_per_class, &a.target);
            set(&mut cfg.extract.words, &a.words);
            set(&mut cfg.extract.seed, &a.seed);
        }
        Command::Augment(a) => {
            set(&mut cfg.data.train, &a.train.clone().map(Some));
            cfg.augment.source = a.mode;
            cfg.augment.bias = a.bias;
            cfg.augment.n_additional = a.n;
            set(&mut cfg.augment.seed, &a.seed);
        }
        Command::Train(a) => {
            set(&mut cfg.data.train, &a.train.clone().map(Some));
            set(&mut cfg.data.dev_mismatched, &a.selection.clone().map(Some));
            set(&mut cfg.model.kind, &a.model);
            set(&mut cfg.model.grl.variant, &a.variant);
            set(&mut cfg.model.grl.loss.lambda, &a.lambda);
            set(&mut cfg.train.max_epochs, &a.epochs);
            set(&mut cfg.train.max_steps, &a.max_steps.map(Some));
            set(&mut cfg.train.lr, &a.lr);
            set(&mut cfg.train.batch_size, &a.batch_size);
            set(&mut cfg.train.seed, &a.seed);
        }
        Command::Explain(a) => {
            set(&mut cfg.explain.top_k, &a.top_k);
            set(&mut cfg.explain.n_samples, &a.samples);
            set(&mut cfg.explain.seed, &a.seed);
        }
        Command::SynthBench(a) => {
            set(&mut cfg.synth.world, &a.world);
            set(&mut cfg.synth.seed, &a.seed);
            set(&mut cfg.synth.n_train, &a.n_train);
            set(&mut cfg.synth.n_dev, &a.n_dev);
        }
        Command::Stress(_) | Command::Eval(_) => {}
    }
}

fn audit(ctx: &Ctx, a: &AuditArgs) -> CmdResult {
    let train = ctx.input(&ctx.cfg.data.train, "training")?;
    let c = &ctx.cfg.audit;
    let stats = compute_word_label_stats(&train, c.min_count);
    let mut words = select_contradiction_words(&stats, c.threshold, c.top_k)?;
    for w in &c.extra_words {
        if !words.contains(w) {
            words.push(w.clone());
        }
    }
    println!(
        "{:<16} {:>8} {:>8} {:>8} {:>8}",
        "word", "count", "p_ent", "p_neu", "p_con"
    );
    for w in &words {
        if let Some(s) = stats.get(w) {
            println!(
                "{:<16} {:>8} {:>8.3} {:>8.3} {:>8.3}",
                s.word,
                s.count,
                s.rate(lexdebias::corpus::Label::Entailment),
                s.rate(lexdebias::corpus::Label::Neutral),
                s.rate(lexdebias::corpus::Label::Contradiction)
            );
        } else {
            println!("{w:<16} (below min_count)");
        }
    }
    if let Some(path) = &a.report {
        write_json(
            path,
            &json!({
                "config_sha256": ctx.digest(),
                "min_count": c.min_count,
                "threshold": c.threshold,
                "selected_words": words,
                "rows": stats.report_rows(),
            }),
        )?;
    }
    Ok(())
}

fn extract(ctx: &Ctx, a: &ExtractArgs) -> CmdResult {
    let c = &ctx.cfg.extract;
    let dev = ctx.input(&ctx.cfg.data.dev_matched, "dev")?;
    create_dir(&a.out_dir)?;
    let name = format!("bal_{}", a.bias);
    let (balanced, manifest) = match a.bias {
        BiasKind::Cwb => {
            let train = ctx.input(&ctx.cfg.data.train, "training")?;
            let mut spec = BalancedSetSpec::cwb(c.words.clone(), c.target_per_class, c.seed);
            spec.not_overlap_threshold = c.not_overlap_threshold;
            let ext = extract_cwb_balanced(&train, &dev, &spec)?;
            ext.train
                .write_jsonl(a.out_dir.join(format!("train_minus_{name}.jsonl")))?;
            (ext.balanced, ext.manifest)
        }
        BiasKind::Wob => {
            let bal = extract_wob_balanced(&dev, c.target_per_class)?;
            let manifest = wob_manifest(&bal, c.target_per_class);
            (bal, manifest)
        }
    };
    balanced.write_jsonl(a.out_dir.join(format!("{name}.jsonl")))?;
    let mut m = serde_json::to_value(&manifest).map_err(lexdebias::Error::from)?;
    m["config_sha256"] = json!(ctx.digest());
    write_json(&a.out_dir.join(format!("{name}.manifest.json")), &m)?;
    let counts = balanced.label_counts();
    println!(
        "{name}: {} examples (entailment {}, neutral {}, contradiction {})",
        balanced.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

fn augment(ctx: &Ctx, a: &AugmentArgs) -> CmdResult {
    let train = ctx.input(&ctx.cfg.data.train, "training")?;
    let c = &ctx.cfg.augment;
    let plan = EnhancementPlan {
        bias_kind: c.bias,
        n_additional: c.n_additional,
        source: c.source,
        seed: c.seed,
    };
    let out = match c.source {
        AugmentSource::Origin => {
            let pool = select_counterbias_pool(
                &train,
                c.bias,
                &ctx.cfg.extract.words,
                ctx.cfg.extract.not_overlap_threshold,
            )?;
            log::info!("counter-bias pool: {} examples", pool.len());
            enhance(&train, &plan, &pool)?
        }
        AugmentSource::Synthetic => augment_synthetic(&train, &plan, &default_cwb_rules())?,
    };
    out.write_jsonl(&a.out)?;
    println!(
        "wrote {} examples ({} added) to {}",
        out.len(),
        out.len() - train.len(),
        a.out.display()
    );
    Ok(())
}

fn stress(ctx: &Ctx, a: &StressArgs) -> CmdResult {
    let ds = ctx.load(&a.data)?;
    let out = stress_dataset(&ds, &default_cwb_rules(), a.bias)?;
    out.write_jsonl(&a.out)?;
    println!("wrote {} stress examples to {}", out.len(), a.out.display());
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> CmdResult {
    let cfg = &ctx.cfg;
    let train_ds = ctx.input(&cfg.data.train, "training")?;
    let selection = ctx.input(&cfg.data.dev_mismatched, "selection")?;
    let warm = match &a.warm_start {
        Some(p) => Some(load_model(ctx.resolve(p))?.0),
        None => None,
    };
    let vocab = match &warm {
        Some(m) => m.vocab.clone(),
        None => build_vocab(&[&train_ds], cfg.data.min_freq),
    };
    let embeddings = match &cfg.data.embeddings {
        Some(p) => {
            let (emb, found) = load_embeddings(ctx.resolve(p), &vocab, cfg.model.encoder.d_e, cfg.train.seed)?;
            log::info!("pretrained vectors cover {found} of {} vocabulary entries", vocab.len());
            Some(emb)
        }
        None => None,
    };
    let mut model = Model::new(cfg.model.clone(), vocab, embeddings, cfg.train.seed)?;
    if let Some(w) = &warm {
        let copied = model.warm_start(w)?;
        log::info!("warm start copied {} parameter tensors", copied.len());
    } else if model.kind() == ModelKind::Hex {
        log::warn!("training HEX without a warm start; the bottom layer is trained from scratch");
    }
    let outcome = train(model, &cfg.train, &train_ds, &selection)?;
    save_model(&outcome.model, &a.out, Some(&ctx.digest()))?;
    if let Some(p) = &a.metrics {
        write_metrics_jsonl(p, &outcome.metrics, Some(&ctx.digest()))?;
    }
    println!(
        "{} model: best epoch {} with selection accuracy {:.4} after {} steps; saved {}",
        cfg.model.kind,
        outcome.best_epoch,
        outcome.best_selection_acc,
        outcome.steps,
        a.out.display()
    );
    Ok(())
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> CmdResult {
    if a.datasets.is_empty() {
        return Err(Failure::Usage("eval needs at least one --datasets PATH[@RULE]".into()));
    }
    let (model, ckpt_digest) = load_model(ctx.resolve(&a.checkpoint))?;
    let mut rows = Vec::new();
    for spec in &a.datasets {
        let (path, rule) = match spec.rsplit_once('@') {
            Some((p, r)) => (p, Some(r.parse::<HardSubsetRule>()?)),
            None => (spec.as_str(), None),
        };
        let ds = ctx.load(Path::new(path))?;
        let row = evaluate(&model, &ds, rule)?;
        match (row.accuracy_hard, &row.rule) {
            (Some(h), Some(r)) => println!(
                "{:<32} n={:<6} acc={:.4}  acc_hr={:.4} (n_hard={}, {r})",
                row.name, row.n, row.accuracy, h, row.n_hard
            ),
            _ => println!("{:<32} n={:<6} acc={:.4}", row.name, row.n, row.accuracy),
        }
        rows.push(row);
    }
    if let Some(p) = &a.report {
        EvalReport {
            config_sha256: ckpt_digest.or_else(|| Some(ctx.digest())),
            rows,
        }
        .write_json(p)?;
    }
    Ok(())
}

fn explain(ctx: &Ctx, a: &ExplainArgs) -> CmdResult {
    let (model, _) = load_model(ctx.resolve(&a.checkpoint))?;
    let ds = ctx.load(&a.data)?;
    let ex = ds
        .find(&a.example_id)
        .ok_or_else(|| Failure::Usage(format!("no example {:?} in {}", a.example_id, a.data.display())))?;
    let target = match a.target {
        Some(t) => t,
        None => model.predict(&[ex], 1)?[0],
    };
    let e = lime_explain(&model, ex, target, &ctx.cfg.explain)?;
    print!("{}", render_bars(&e, 30));
    if e.ridge_escalated {
        eprintln!("warning: degenerate design; ridge raised to {:e}", e.ridge);
    }
    if let Some(p) = &a.json {
        let mut v = serde_json::to_value(&e).map_err(lexdebias::Error::from)?;
        v["config_sha256"] = json!(ctx.digest());
        write_json(p, &v)?;
    }
    Ok(())
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> CmdResult {
    let c = &ctx.cfg.synth;
    let corpus = generate(c)?;
    corpus.write_dir(&a.out_dir)?;
    let spec = BalancedSetSpec::cwb(ctx.cfg.extract.words.clone(), a.bal_target, c.seed);
    let ext = extract_cwb_balanced(&corpus.train, &corpus.dev_matched, &spec)?;
    ext.balanced.write_jsonl(a.out_dir.join("bal_cwb.jsonl"))?;
    ext.train.write_jsonl(a.out_dir.join("train_minus_bal_cwb.jsonl"))?;
    let bal_wob = extract_wob_balanced(&corpus.dev_matched, a.bal_target)?;
    bal_wob.write_jsonl(a.out_dir.join("bal_wob.jsonl"))?;
    for kind in [BiasKind::Cwb, BiasKind::Wob] {
        stress_dataset(&corpus.dev_matched, &default_cwb_rules(), kind)?
            .write_jsonl(a.out_dir.join(format!("stress_{kind}.jsonl")))?;
    }
    write_json(
        &a.out_dir.join("manifest.json"),
        &json!({
            "config_sha256": ctx.digest(),
            "synth": c,
            "bal_cwb": ext.manifest,
            "bal_wob": wob_manifest(&bal_wob, a.bal_target),
        }),
    )?;
    println!(
        "wrote synthetic benchmark to {} (train {}, dev {} + {}, bal_cwb {}, bal_wob {})",
        a.out_dir.display(),
        corpus.train.len(),
        corpus.dev_matched.len(),
        corpus.dev_mismatched.len(),
        ext.balanced.len(),
        bal_wob.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("lexdebias").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_fold_into_the_digested_config() {
        let cli = parse(&["train", "--model", "hex", "--lr", "0.01", "--max-steps", "7", "--out", "m.json"]);
        let mut cfg = RunConfig::default();
        let before = cfg.digest();
        apply_overrides(&mut cfg, &cli.command);
        assert_eq!(cfg.model.kind, ModelKind::Hex);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.max_steps, Some(7));
        assert_ne!(cfg.digest(), before);

        // absent flags keep configured values
        let cli = parse(&["train", "--out", "m.json"]);
        let mut same = RunConfig::default();
        apply_overrides(&mut same, &cli.command);
        assert_eq!(same.digest(), before);
    }

    #[test]
    fn relative_inputs_resolve_against_the_data_dir() {
        let ctx = Ctx {
            cfg: RunConfig::default(),
            data_dir: Some(PathBuf::from("/data")),
        };
        assert_eq!(ctx.resolve(Path::new("train.jsonl")), Path::new("/data/train.jsonl"));
        assert_eq!(ctx.resolve(Path::new("/abs/x.jsonl")), Path::new("/abs/x.jsonl"));
        let missing = ctx.input(&None, "training").unwrap_err();
        assert!(matches!(missing, Failure::Usage(_)));
    }
}
