use std::fs;

use anyhow::{bail, Context};
use pacbayes_core::certify::{self, BoundReport, CertifyInputs};
use pacbayes_core::data::LabelKind;
use pacbayes_core::nn::init_weights;
use pacbayes_core::pacbayes::{
    BoundOptimizer, ObjectiveVariant, OptimizerState, PosteriorCheckpoint, PriorSpec, SigmaInit,
};
use pacbayes_core::pathnorm::{self, MarginBoundQuery, PathNormRunConfig};
use pacbayes_core::sgd::{SgdCheckpoint, SgdConfig, SgdState, SgdTrainer};
use pacbayes_core::Error as CoreError;

use crate::config::{parse_schedule, ExperimentConfig};
use crate::run::{self, RunDir, INIT_CKPT, POSTERIOR_CKPT, SGD_CKPT};
use crate::{
    resolve_common, CertifyArgs, CommonArgs, Failure, Labels, OptimizeArgs, PathnormArgs, ReportArgs,
    SigmaInitArg, TrainArgs, Variant,
};

/// Resolves and validates the config; prints it and returns `None` for `--print-config`.
fn finish_config(
    common: &CommonArgs,
    cfg: ExperimentConfig,
) -> anyhow::Result<Option<ExperimentConfig>> {
    let cfg = cfg.resolve().context(Failure::Config)?;
    if common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn load_data(cfg: &ExperimentConfig) -> anyhow::Result<(pacbayes_core::data::LabeledDataset, pacbayes_core::data::LabeledDataset)> {
    run::load_data(cfg).context(Failure::Data)
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let (mut cfg, run_path) = resolve_common(&args.common).context(Failure::Config)?;
    if let Some(v) = args.epochs {
        cfg.sgd.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.sgd.learning_rate = v;
    }
    if let Some(v) = args.momentum {
        cfg.sgd.momentum = v;
    }
    if let Some(v) = args.batch_size {
        cfg.sgd.batch_size = v;
    }
    if let Some(v) = args.subset {
        cfg.data.subset = Some(v);
    }
    if let Some(v) = args.init_sigma {
        cfg.init_sigma = v;
    }
    match args.labels {
        Some(Labels::True) => {
            cfg.data.labels = LabelKind::True;
            cfg.bound.sigma_init = SigmaInit::AbsWeights;
        }
        Some(Labels::Random) => {
            cfg.data.labels = LabelKind::Random;
            cfg.bound.sigma_init = SigmaInit::AbsWeightsOverTen;
        }
        None => {}
    }
    let Some(cfg) = finish_config(&args.common, cfg)? else {
        return Ok(());
    };
    let (train, test) = load_data(&cfg)?;
    let dir = RunDir::create(&run_path)?;
    dir.write_config(&cfg)?;

    let arch = cfg.architecture()?;
    let sgd_path = dir.file(SGD_CKPT);
    let state = if args.resume && sgd_path.exists() {
        let ckpt = SgdCheckpoint::load(&sgd_path)?;
        if ckpt.state.weights.arch() != &arch {
            bail!(CoreError::Architecture(format!("checkpoint is {}, config is {arch}", ckpt.state.weights.arch())));
        }
        log::info!("resuming after epoch {}", ckpt.state.epoch);
        ckpt.state
    } else {
        let w0 = init_weights(&arch, cfg.init_sigma, cfg.seed)?;
        SgdCheckpoint {
            state: SgdState::new(w0.clone()),
            config: cfg.sgd.clone(),
            init_seed: Some(cfg.seed),
        }
        .save(dir.file(INIT_CKPT))?;
        SgdState::new(w0)
    };

    let mut trainer = SgdTrainer::new(state, cfg.sgd.clone(), &train)?.with_test(&test);
    while trainer.state().epoch < cfg.sgd.epochs {
        match trainer.run_epoch(&mut |_, _| Ok(())) {
            Ok(r) => {
                log::info!(
                    "epoch {}: batch loss {:.5}, train error {}, test error {}",
                    r.epoch,
                    r.mean_batch_loss,
                    fmt_error(r.train_error),
                    fmt_error(r.test_error)
                )
            }
            Err(CoreError::Diverged { epoch, step, last_finite }) => {
                let mut state = trainer.state().clone();
                state.weights = *last_finite.clone();
                SgdCheckpoint { state, config: cfg.sgd.clone(), init_seed: Some(cfg.seed) }
                    .save(dir.file("sgd_last_finite.bin"))?;
                return Err(CoreError::Diverged { epoch, step, last_finite }.into());
            }
            Err(e) => return Err(e.into()),
        }
        SgdCheckpoint {
            state: trainer.state().clone(),
            config: cfg.sgd.clone(),
            init_seed: Some(cfg.seed),
        }
        .save(&sgd_path)?;
    }
    let state = trainer.into_state();
    run::write_csv(&dir.file("history.csv"), &state.history)?;
    dir.record(
        "train",
        &cfg,
        &[INIT_CKPT.into(), SGD_CKPT.into(), "history.csv".into(), run::CONFIG_FILE.into()],
    )?;
    if let Some(last) = state.history.last() {
        println!(
            "{}: train error {}, test error {} after {} epochs",
            cfg.name,
            fmt_error(last.train_error),
            fmt_error(last.test_error),
            last.epoch
        );
    }
    Ok(())
}

fn fmt_error(v: Option<f64>) -> String {
    v.map(|e| format!("{e:.4}")).unwrap_or_else(|| "-".into())
}

fn load_pretrained(dir: &RunDir, cfg: &ExperimentConfig) -> anyhow::Result<(SgdCheckpoint, SgdCheckpoint)> {
    let init = SgdCheckpoint::load(dir.file(INIT_CKPT)).context("loading the initialization (run `train` first)")?;
    let sgd = SgdCheckpoint::load(dir.file(SGD_CKPT)).context("loading the SGD checkpoint (run `train` first)")?;
    let arch = cfg.architecture()?;
    for (what, ckpt) in [("initialization", &init), ("SGD checkpoint", &sgd)] {
        if ckpt.state.weights.arch() != &arch {
            bail!(CoreError::Architecture(format!(
                "{what} is {}, config is {arch}",
                ckpt.state.weights.arch()
            )));
        }
    }
    Ok((init, sgd))
}

pub fn optimize_bound(args: OptimizeArgs) -> anyhow::Result<()> {
    let (mut cfg, run_path) = resolve_common(&args.common).context(Failure::Config)?;
    if let Some(v) = args.iters {
        cfg.bound.iterations = v;
    }
    if let Some(text) = &args.lr {
        cfg.bound.schedule = parse_schedule(text, cfg.bound.iterations).context(Failure::Config)?;
    }
    if let Some(v) = args.minibatch {
        cfg.bound.minibatch = Some(v);
    }
    if let Some(v) = args.samples {
        cfg.bound.samples_per_iteration = v;
    }
    if let Some(v) = args.variant {
        cfg.bound.variant = match v {
            Variant::SquareRoot => ObjectiveVariant::SquareRoot,
            Variant::Linear => ObjectiveVariant::Linear,
        };
    }
    if let Some(v) = args.sigma_init {
        cfg.bound.sigma_init = match v {
            SigmaInitArg::AbsWeights => SigmaInit::AbsWeights,
            SigmaInitArg::AbsWeightsOverTen => SigmaInit::AbsWeightsOverTen,
        };
    }
    if let Some(v) = args.rho_init {
        cfg.bound.rho_init = v;
    }
    if let Some(v) = args.trace_every {
        cfg.bound.trace_every = v;
    }
    let Some(cfg) = finish_config(&args.common, cfg)? else {
        return Ok(());
    };
    if args.checkpoint_every == 0 {
        bail!(Failure::Config);
    }
    let dir = RunDir::create(&run_path)?;
    let (init, sgd) = load_pretrained(&dir, &cfg)?;
    let (train, _) = load_data(&cfg)?;
    dir.write_config(&cfg)?;
    let prior = PriorSpec {
        mean: init.state.weights.clone(),
        b: cfg.prior.b,
        c: cfg.prior.c,
        delta: cfg.prior.delta,
        m: train.len(),
    };

    let post_path = dir.file(POSTERIOR_CKPT);
    let (state, trace) = if args.resume && post_path.exists() {
        let ckpt = PosteriorCheckpoint::load(&post_path)?;
        if ckpt.prior != prior {
            bail!("posterior checkpoint was built against a different prior");
        }
        log::info!("resuming at iteration {}", ckpt.state.iteration);
        (ckpt.state, ckpt.trace)
    } else {
        (OptimizerState::initial(&sgd.state.weights, &cfg.bound), Vec::new())
    };
    let mut opt = BoundOptimizer::new(state, cfg.bound.clone(), &prior, &train)?.with_trace(trace);
    let save = |opt: &BoundOptimizer<'_>, path: &std::path::Path| -> anyhow::Result<()> {
        PosteriorCheckpoint {
            state: opt.state().clone(),
            prior: prior.clone(),
            config: cfg.bound.clone(),
            trace: opt.trace().to_vec(),
        }
        .save(path)?;
        Ok(())
    };
    while opt.state().iteration < cfg.bound.iterations {
        let record = match opt.step() {
            Ok(r) => r,
            Err(CoreError::ObjectiveDiverged { iteration, last_finite }) => {
                PosteriorCheckpoint {
                    state: (*last_finite).clone(),
                    prior: prior.clone(),
                    config: cfg.bound.clone(),
                    trace: opt.trace().to_vec(),
                }
                .save(dir.file("posterior_last_finite.bin"))?;
                return Err(CoreError::ObjectiveDiverged { iteration, last_finite }.into());
            }
            Err(e) => return Err(e.into()),
        };
        if record.iteration % 1000 == 0 {
            log::info!(
                "iter {}: objective {:.5}, surrogate {:.5}, KL {:.1}, B_RE {:.5}, lambda {:.3e}",
                record.iteration,
                record.objective,
                record.surrogate,
                record.kl,
                record.b_re,
                record.lambda
            );
        }
        if opt.state().iteration % args.checkpoint_every == 0 {
            save(&opt, &post_path)?;
        }
    }
    save(&opt, &post_path)?;
    if opt.state().clamp_events > 0 {
        log::warn!("prior variance was clamped {} times", opt.state().clamp_events);
    }
    run::write_csv(&dir.file("trace.csv"), opt.trace())?;
    dir.record(
        "optimize-bound",
        &cfg,
        &[POSTERIOR_CKPT.into(), "trace.csv".into(), run::CONFIG_FILE.into()],
    )?;
    Ok(())
}

pub fn certify(args: CertifyArgs) -> anyhow::Result<()> {
    let (mut cfg, run_path) = resolve_common(&args.common).context(Failure::Config)?;
    if let Some(v) = args.n {
        cfg.eval.n_train = v;
    }
    if let Some(v) = args.n_test {
        cfg.eval.n_test = v;
    }
    if let Some(v) = args.delta_prime {
        cfg.eval.delta_prime = v;
    }
    if let Some(v) = args.pvalue_samples {
        cfg.eval.pvalue_samples = v;
    }
    let Some(cfg) = finish_config(&args.common, cfg)? else {
        return Ok(());
    };
    let dir = RunDir::create(&run_path)?;
    let (_, sgd) = load_pretrained(&dir, &cfg)?;
    let post = PosteriorCheckpoint::load(dir.file(POSTERIOR_CKPT))
        .context("loading the posterior (run `optimize-bound` first)")?;
    let (train, test) = load_data(&cfg)?;
    if post.prior.m != train.len() {
        bail!(Failure::Config);
    }
    dir.write_config(&cfg)?;
    let inputs = CertifyInputs {
        name: cfg.name.clone(),
        w_sgd: &sgd.state.weights,
        posterior: &post.state.posterior,
        rho: post.state.rho,
        prior: &post.prior,
        train: &train,
        test: Some(&test),
        n_train: cfg.eval.n_train,
        n_test: cfg.eval.n_test,
        delta_prime: cfg.eval.delta_prime,
        mc_seed: cfg.seed,
        pvalue_samples: cfg.eval.pvalue_samples,
        pvalue_seed: cfg.seed,
    };
    let mut report = certify::certify(&inputs)?;
    report.config_digest = Some(cfg.digest()?);
    report.config = Some(serde_json::to_value(&cfg)?);
    report.deviations = cfg.deviations();
    if post.state.iteration < cfg.bound.iterations {
        report.deviations.push(format!(
            "posterior checkpoint stopped at iteration {} of {}",
            post.state.iteration, cfg.bound.iterations
        ));
    }
    fs::write(dir.file("report.json"), serde_json::to_vec_pretty(&report)?)?;
    run::write_csv(&dir.file("report.csv"), &[report.row()])?;
    dir.record("certify", &cfg, &["report.json".into(), "report.csv".into()])?;
    print_report(&report);
    if report.vacuous && !args.allow_vacuous {
        bail!(Failure::Vacuous);
    }
    Ok(())
}

fn print_report(r: &BoundReport) {
    println!("{}", r.name);
    println!("  train error (SGD)      {:.4}", r.train_error);
    if let Some(t) = r.test_error {
        println!("  test error (SGD)       {t:.4}");
    }
    println!("  SNN train error        {:.4} (MC {:.4}, n = {})", r.snn_train_upper, r.snn_train_mc, r.n_train);
    if let (Some(u), Some(mc)) = (r.snn_test_upper, r.snn_test_mc) {
        println!("  SNN test error         {u:.4} (MC {mc:.4}, n = {})", r.n_test);
    }
    println!("  KL                     {:.1}", r.kl);
    println!("  sqrt(B_RE / 2)         {:.4}", r.sqrt_half_b_re);
    println!("  PAC-Bayes bound        {:.4}{}", r.bound, if r.vacuous { " (vacuous)" } else { "" });
    println!("  lambda                 {:.4e} (j = {})", r.lambda, r.j);
    println!("  confidence             {:.3}", r.confidence);
    if let Some(p) = r.pvalue {
        println!("  p-value of SGD weights {p} ({} draws)", r.pvalue_samples);
    }
    for d in &r.deviations {
        println!("  deviation: {d}");
    }
}

pub fn pathnorm(args: PathnormArgs) -> anyhow::Result<()> {
    let (mut cfg, run_path) = resolve_common(&args.common).context(Failure::Config)?;
    if !args.rhos.is_empty() {
        cfg.pathnorm.rhos = args.rhos.clone();
    }
    if let Some(v) = args.epochs {
        cfg.pathnorm.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.pathnorm.learning_rate = v;
    }
    if let Some(v) = args.eval_every {
        cfg.pathnorm.eval_every_steps = v;
    }
    if let Some(v) = args.subset {
        cfg.data.subset = Some(v);
    }
    if let Some(v) = args.init_sigma {
        cfg.pathnorm.init_sigma = v;
    }
    let Some(cfg) = finish_config(&args.common, cfg)? else {
        return Ok(());
    };
    let (train, test) = load_data(&cfg)?;
    let dir = RunDir::create(&run_path)?;
    dir.write_config(&cfg)?;
    let arch = cfg.architecture()?;
    let w0 = init_weights(&arch, cfg.pathnorm.init_sigma, cfg.seed)?;
    let initial = pathnorm::margin_bound(&MarginBoundQuery::new(&w0, &train, cfg.pathnorm.delta))?;
    fs::write(dir.file("pathnorm_initial_bound.json"), serde_json::to_vec_pretty(&initial)?)?;
    let mut outputs = vec!["pathnorm_initial_bound.json".to_string()];
    for &rho in &cfg.pathnorm.rhos {
        let run_cfg = PathNormRunConfig {
            sgd: SgdConfig {
                learning_rate: cfg.pathnorm.learning_rate,
                momentum: cfg.pathnorm.momentum,
                batch_size: cfg.pathnorm.batch_size,
                epochs: cfg.pathnorm.epochs,
                shuffle_seed: cfg.seed,
                eval_every: 0,
            },
            rho,
            delta: cfg.pathnorm.delta,
            eval_every_steps: cfg.pathnorm.eval_every_steps,
        };
        log::info!("path-norm run with rho = {rho}");
        let (w, history) = pathnorm::train_pathnorm_regularized(&w0, &train, Some(&test), &run_cfg)?;
        let trace = format!("pathnorm_rho_{rho}.csv");
        run::write_csv(&dir.file(&trace), &history)?;
        let table = format!("pathnorm_rho_{rho}_final_bound.json");
        let bound = pathnorm::margin_bound(&MarginBoundQuery::new(&w, &train, cfg.pathnorm.delta))?;
        fs::write(dir.file(&table), serde_json::to_vec_pretty(&bound)?)?;
        if let Some(last) = history.last() {
            println!(
                "rho {rho}: train error {:.4}, path norm {:.4e}, margin bound {:.4} (optimistic{})",
                last.train_error,
                last.path_norm,
                last.bound,
                if last.vacuous { ", vacuous" } else { "" }
            );
        }
        outputs.push(trace);
        outputs.push(table);
    }
    dir.record("pathnorm", &cfg, &outputs)?;
    Ok(())
}

pub fn report(args: ReportArgs) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for run in &args.runs {
        let path = run.join("report.json");
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let report: BoundReport = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        if report.schema_version != certify::REPORT_SCHEMA_VERSION {
            bail!("{} has schema version {}", path.display(), report.schema_version);
        }
        rows.push(report.row());
    }
    println!(
        "{:<12} {:>8} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "name", "train", "test", "SNN train", "SNN test", "bound", "KL"
    );
    for r in &rows {
        println!(
            "{:<12} {:>8.4} {:>8} {:>10.4} {:>10} {:>10.4} {:>10.0}",
            r.name,
            r.train_error,
            r.test_error.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.snn_train_error,
            r.snn_test_error.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.pac_bayes_bound,
            r.kl
        );
    }
    if let Some(out) = &args.out {
        run::write_csv(out, &rows)?;
    }
    Ok(())
}
