use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowmix::classifier::ClassifierBundle;
use flowmix::data::{self, CsvOptions, Dataset, IdxOptions, Preprocess, Standardization};
use flowmix::eval;
use flowmix::flow::GridShape;
use flowmix::genmm::Selection;
use flowmix::mixture::{self, MixtureModel};
use flowmix::persist::{fmt_f64, fmt_f64_list, parse_f64_list};
use flowmix::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_label_column, DataSource, PreprocessSpec, RunConfig};
use crate::error::{CliError, Result};
use crate::output;
use crate::{
    ClassifyAccuracyArgs, ClassifyAddArgs, ClassifyCommand, ClassifyFitArgs, ClassifyPredictArgs, Command, DataArgs,
    EvalCommand, EvalNllArgs, ImageArgs, InterpolateArgs, ModelArgs, NllVsKArgs, SampleArgs, SelectionArg, TrainArgs,
    TwoSampleArgs,
};

const META_GRID: &str = "grid";
const META_MEAN: &str = "standardize.mean";
const META_STD: &str = "standardize.std";
const META_DEQUANTIZE: &str = "dequantize.scale";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Classify(c) => match c {
            ClassifyCommand::Fit(a) => classify_fit(a),
            ClassifyCommand::Predict(a) => classify_predict(a),
            ClassifyCommand::AddClass(a) => classify_add(a),
            ClassifyCommand::Accuracy(a) => classify_accuracy(a),
        },
        Command::Eval(c) => match c {
            EvalCommand::Nll(a) => eval_nll(a),
            EvalCommand::Mmd(a) => eval_two_sample(a, Metric::Mmd),
            EvalCommand::Onenn(a) => eval_two_sample(a, Metric::OneNn),
            EvalCommand::NllVsK(a) => nll_vs_k(a),
        },
    }
}

fn run_config(model: &ModelArgs, data: &DataArgs) -> Result<RunConfig> {
    let mut overrides = model.overrides();
    overrides.extend(data.overrides());
    RunConfig::build(model.config.as_deref(), &overrides)
}

// ---------------------------------------------------------------------------
// Data loading

fn is_idx(path: &Path) -> bool {
    use std::io::Read;
    let mut magic = [0u8; 4];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .is_ok_and(|()| magic == [0, 0, 8, 3])
}

/// `synth:ring:MODES:RADIUS:STD:N`, drawn with `seed`.
fn synthetic(spec: &str, seed: u64) -> Result<Dataset> {
    let bad = || CliError::Config(format!("data: expected synth:ring:MODES:RADIUS:STD:N, got {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [_, "ring", modes, radius, std, n] = parts[..] else {
        return Err(bad());
    };
    let modes: usize = modes.parse().map_err(|_| bad())?;
    let radius: f64 = radius.parse().map_err(|_| bad())?;
    let std: f64 = std.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    if modes == 0 || n == 0 || !(std > 0.0) || !radius.is_finite() {
        return Err(bad());
    }
    Ok(data::synth_multimodal(&data::ring_modes(modes, radius, std), n, seed)?)
}

/// Raw dataset plus the image grid it implies (IDX input only).
fn load_source(src: &DataSource, seed: u64) -> Result<(Dataset, Option<GridShape>)> {
    let path = src
        .path
        .as_ref()
        .ok_or_else(|| CliError::Config("no dataset given (use --data or data= in the config)".into()))?;
    let text = path.to_string_lossy();
    if text.starts_with("synth:") {
        return Ok((synthetic(&text, seed)?, None));
    }
    if is_idx(path) {
        let ds = data::load_idx(
            path,
            src.idx_labels.as_deref(),
            IdxOptions {
                target_grid: src.downsample,
            },
        )?;
        // Without downsampling, a square image is assumed.
        let side = (ds.dim() as f64).sqrt().round() as usize;
        let (height, width) = src.downsample.unwrap_or((side, side));
        let grid = (height * width == ds.dim()).then_some(GridShape {
            channels: 1,
            height,
            width,
        });
        return Ok((ds, grid));
    }
    let options = CsvOptions {
        label_column: src.label_column.clone(),
        known_labels: Vec::new(),
    };
    Ok((data::load_csv(path, &options)?, None))
}

fn load_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let options = CsvOptions {
        label_column: label_column.map(parse_label_column),
        known_labels: Vec::new(),
    };
    Ok(data::load_csv(path, &options)?)
}

fn preprocess_with(ds: &Dataset, spec: PreprocessSpec, seed: u64) -> (Dataset, Option<Standardization>) {
    let spec = match spec {
        PreprocessSpec::None => Preprocess::None,
        PreprocessSpec::Standardize => Preprocess::Standardize,
        PreprocessSpec::Dequantize(scale) => Preprocess::Dequantize { scale, seed },
    };
    data::preprocess(ds, spec)
}

// ---------------------------------------------------------------------------
// Model files

fn load_model(path: &Path) -> Result<MixtureModel> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Persist(format!("cannot read model file {}: {e}", path.display())))?;
    MixtureModel::from_bytes(&bytes).map_err(|e| CliError::Persist(format!("{}: {e}", path.display())))
}

fn save_model(path: &Path, model: &MixtureModel) -> Result<()> {
    output::write_file(path, &model.to_bytes())
}

fn standardization(model: &MixtureModel) -> Result<Option<Standardization>> {
    match (model.meta_value(META_MEAN), model.meta_value(META_STD)) {
        (Some(m), Some(s)) => {
            let stats = Standardization {
                mean: parse_f64_list(m)?,
                std: parse_f64_list(s)?,
            };
            if stats.mean.len() != model.dim() || stats.std.len() != model.dim() {
                return Err(CliError::Persist("standardization statistics do not match the model dimension".into()));
            }
            Ok(Some(stats))
        }
        _ => Ok(None),
    }
}

/// Mean log standard deviation: the per-dimension NLL offset between raw and standardized units.
fn log_std_offset(stats: &Standardization) -> f64 {
    stats.std.iter().map(|s| s.ln()).sum::<f64>() / stats.std.len().max(1) as f64
}

/// Model inputs for raw rows, following the preprocessing recorded with the model.
fn to_model_space(model: &MixtureModel, ds: &Dataset, seed: u64) -> Result<(Dataset, f64)> {
    if ds.dim() != model.dim() {
        return Err(CliError::Data(format!(
            "data has {} features but the model expects {}",
            ds.dim(),
            model.dim()
        )));
    }
    if let Some(stats) = standardization(model)? {
        let mut out = ds.clone();
        out.samples = stats.apply(&ds.samples);
        return Ok((out, log_std_offset(&stats)));
    }
    if let Some(scale) = model.meta_value(META_DEQUANTIZE) {
        let scale: f64 = scale
            .parse()
            .map_err(|_| CliError::Persist(format!("bad {META_DEQUANTIZE} entry {scale:?}")))?;
        return Ok((preprocess_with(ds, PreprocessSpec::Dequantize(scale), seed).0, 0.0));
    }
    Ok((ds.clone(), 0.0))
}

fn to_data_space(model: &MixtureModel, x: Tensor) -> Result<Tensor> {
    Ok(match standardization(model)? {
        Some(stats) => stats.invert(&x),
        None => x,
    })
}

fn data_nll(model: &MixtureModel, ds: &Dataset, offset: f64) -> Result<f64> {
    Ok(model.evaluate_nll(ds)? + offset)
}

fn model_comments(path: &Path, model: &MixtureModel) -> Vec<String> {
    let mut out = vec![
        format!("model_file={}", path.display()),
        format!("model={}", model.kind().name()),
        format!("k={}", model.k()),
        format!("dim={}", model.dim()),
    ];
    out.extend(model.meta().iter().map(|(k, v)| format!("{k}={v}")));
    out
}

// ---------------------------------------------------------------------------
// train

fn train(args: TrainArgs) -> Result<()> {
    let cfg = run_config(&args.model, &args.data)?;
    let seed = cfg.settings.em.seed;
    let (raw, idx_grid) = load_source(&cfg.data, seed)?;
    let (ds, stats) = preprocess_with(&raw, cfg.data.preprocess, seed);
    let offset = stats.as_ref().map_or(0.0, log_std_offset);

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let mut comments = cfg.to_lines();
    comments.extend(ds.preprocessing.iter().map(|p| format!("preprocessing: {p}")));
    if stats.is_some() {
        comments.push(format!("nll_units=standardized features; add {offset:?} for data units"));
    }

    let annotate = |model: &mut MixtureModel| {
        for line in cfg.to_lines() {
            if let Some((k, v)) = line.split_once('=') {
                model.set_meta(&format!("config.{k}"), v);
            }
        }
        if let Some(g) = cfg.settings.spec.flow.grid.or(idx_grid) {
            model.set_meta(META_GRID, &format!("{}x{}x{}", g.channels, g.height, g.width));
        }
        if let Some(s) = &stats {
            model.set_meta(META_MEAN, &fmt_f64_list(&s.mean));
            model.set_meta(META_STD, &fmt_f64_list(&s.std));
        }
        if let PreprocessSpec::Dequantize(scale) = cfg.data.preprocess {
            model.set_meta(META_DEQUANTIZE, &fmt_f64(scale));
        }
    };

    match mixture::fit(&cfg.settings.spec, &ds, &cfg.settings.em) {
        Ok((mut model, log)) => {
            annotate(&mut model);
            save_model(&args.out, &model)?;
            output::write_file(&log_path, log.to_csv(&comments).as_bytes())?;
            println!("nll_per_dim={:?}", data_nll(&model, &ds, offset)?);
            Ok(())
        }
        Err(failure) if failure.error.is_numerical() => {
            let message = failure.to_string();
            comments.push(format!("aborted: {message}"));
            let mut model = failure.checkpoint;
            annotate(&mut model);
            save_model(&args.out, &model)?;
            output::write_file(&log_path, failure.log.to_csv(&comments).as_bytes())?;
            Err(CliError::Numeric(format!(
                "{message}; checkpoint from the start of epoch {} kept in {}",
                failure.epoch,
                args.out.display()
            )))
        }
        Err(failure) => Err(failure.error.into()),
    }
}

// ---------------------------------------------------------------------------
// sample / interpolate

fn image_grid(model: &MixtureModel, image: &ImageArgs) -> Result<Option<GridShape>> {
    let text = match (&image.image, model.meta_value(META_GRID)) {
        (Some(t), _) => t.clone(),
        (None, Some(t)) => t.to_string(),
        (None, None) => return Ok(None),
    };
    let parts: Vec<usize> = text
        .split('x')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Config(format!("image shape: expected HxW or CxHxW, got {text:?}")))?;
    let (channels, height, width) = match parts[..] {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(CliError::Config(format!("image shape: expected HxW or CxHxW, got {text:?}"))),
    };
    Ok(Some(GridShape {
        channels,
        height,
        width,
    }))
}

fn write_images(model: &MixtureModel, image: &ImageArgs, x: &Tensor) -> Result<()> {
    if image.pgm_dir.is_none() && image.svg.is_none() {
        return Ok(());
    }
    let grid = image_grid(model, image)?
        .ok_or_else(|| CliError::Config("image output needs --image HxW (the model stores no grid)".into()))?;
    if let Some(dir) = &image.pgm_dir {
        output::write_pgms(dir, x, grid, image.pixel_max)?;
    }
    if let Some(svg) = &image.svg {
        let columns = (x.rows() as f64).sqrt().ceil() as usize;
        output::write_file(svg, output::contact_sheet_svg(x, grid, image.pixel_max, columns)?.as_bytes())?;
    }
    Ok(())
}

fn sample(args: SampleArgs) -> Result<()> {
    let model = load_model(&args.model_file)?;
    let count = usize::try_from(args.count).map_err(|_| CliError::Config("--count is too large".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (x, _) = model.sample(count, &mut rng)?;
    let x = to_data_space(&model, x)?;
    let mut comments = model_comments(&args.model_file, &model);
    comments.push(format!("count={count}"));
    comments.push(format!("seed={}", args.seed));
    output::emit(args.out.as_deref(), &output::matrix_csv(&comments, &x))?;
    write_images(&model, &args.image, &x)
}

fn interpolate(args: InterpolateArgs) -> Result<()> {
    let model = load_model(&args.model_file)?;
    let raw = load_csv(&args.data, args.label_column.as_deref())?;
    for (name, i) in [("start", args.start), ("end", args.end)] {
        if i >= raw.len() {
            return Err(CliError::Data(format!(
                "--{name} {i} is out of range for {} rows in {}",
                raw.len(),
                args.data.display()
            )));
        }
    }
    let (ds, _) = to_model_space(&model, &raw, args.seed)?;
    let steps = usize::try_from(args.steps).map_err(|_| CliError::Config("--steps is too large".into()))?;
    let selection = match args.selection {
        SelectionArg::Argmax => Selection::ArgmaxGamma,
        SelectionArg::Random => Selection::RandomPrior,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let path = model.interpolate(ds.samples.row(args.start), ds.samples.row(args.end), steps, selection, &mut rng)?;
    let path = to_data_space(&model, path)?;
    let mut comments = model_comments(&args.model_file, &model);
    comments.extend([
        format!("data={}", args.data.display()),
        format!("start={}", args.start),
        format!("end={}", args.end),
        format!("steps={steps}"),
        format!("selection={:?}", args.selection).to_lowercase(),
        format!("seed={}", args.seed),
    ]);
    output::emit(args.out.as_deref(), &output::matrix_csv(&comments, &path))?;
    write_images(&model, &args.image, &path)
}

// ---------------------------------------------------------------------------
// classify

fn classify_fit(args: ClassifyFitArgs) -> Result<()> {
    let cfg = run_config(&args.model, &args.data)?;
    if cfg.data.preprocess == PreprocessSpec::Standardize {
        return Err(CliError::Config(
            "classify supports preprocess=none or dequantize; standardize the features beforehand".into(),
        ));
    }
    let seed = cfg.settings.em.seed;
    let (raw, _) = load_source(&cfg.data, seed)?;
    let (ds, _) = preprocess_with(&raw, cfg.data.preprocess, seed);
    let (spec, em) = (&cfg.settings.spec, &cfg.settings.em);

    let mut bundle = match &args.curve {
        None => ClassifierBundle::fit(&ds, spec, em)?.0,
        Some(curve_path) => {
            let test = match &args.test_data {
                Some(p) => Some(load_csv(p, cfg.data.label_column.as_ref().map(label_text).as_deref())?),
                None => None,
            };
            let mut sets = vec![&raw];
            sets.extend(test.as_ref());
            let (bundle, _, curve) = ClassifierBundle::fit_with_curve(&ds, spec, em, &sets)?;
            let mut text = output::comment_block(&cfg.to_lines());
            text.push_str(if test.is_some() {
                "epoch,train_accuracy,test_accuracy\n"
            } else {
                "epoch,train_accuracy\n"
            });
            for (t, row) in curve.iter().enumerate() {
                let _ = write!(text, "{}", t + 1);
                for a in row {
                    let _ = write!(text, ",{a:?}");
                }
                text.push('\n');
            }
            output::write_file(curve_path, text.as_bytes())?;
            bundle
        }
    };
    if args.class_prior {
        bundle.set_empirical_prior(&raw)?;
    }
    bundle.save(&args.bundle)?;
    println!("classes={}", bundle.class_ids().join(","));
    println!("train_accuracy={:?}", bundle.evaluate_accuracy(&raw)?.accuracy);
    Ok(())
}

fn label_text(c: &data::LabelColumn) -> String {
    match c {
        data::LabelColumn::Index(i) => i.to_string(),
        data::LabelColumn::Name(n) => n.clone(),
    }
}

fn load_bundle(dir: &Path) -> Result<ClassifierBundle> {
    ClassifierBundle::load(dir).map_err(|e| CliError::Persist(format!("{}: {e}", dir.display())))
}

fn classify_predict(args: ClassifyPredictArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let ds = load_csv(&args.data, args.label_column.as_deref())?;
    let predictions = bundle.predict(&ds.samples)?;
    let mut text = output::comment_block(&[format!("bundle={}", args.bundle.display()), format!("data={}", args.data.display())]);
    text.push_str(&output::comment_block(&bundle.settings().to_lines()));
    text.push_str("sample_index,predicted_class");
    for id in bundle.class_ids() {
        let _ = write!(text, ",ll_{id}");
    }
    text.push('\n');
    for (i, p) in predictions.iter().enumerate() {
        let _ = write!(text, "{i},{}", bundle.class_ids()[p.class]);
        for ll in &p.log_likelihoods {
            let _ = write!(text, ",{ll:?}");
        }
        text.push('\n');
    }
    output::emit(args.out.as_deref(), &text)
}

fn classify_add(args: ClassifyAddArgs) -> Result<()> {
    let mut bundle = load_bundle(&args.bundle)?;
    let ds = load_csv(&args.data, args.label_column.as_deref())?;
    let ds = match ds.labels.is_some() {
        true => match ds.label_names.iter().position(|n| *n == args.class_id) {
            Some(y) => ds.class_subset(y),
            None => {
                return Err(CliError::Data(format!(
                    "no rows labelled {:?} in {}",
                    args.class_id,
                    args.data.display()
                )))
            }
        },
        false => ds,
    };
    bundle.add_class(&args.class_id, &ds)?;
    bundle.save(&args.bundle)?;
    println!("classes={}", bundle.class_ids().join(","));
    Ok(())
}

fn classify_accuracy(args: ClassifyAccuracyArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let ds = load_csv(&args.data, Some(&args.label_column))?;
    let report = bundle.evaluate_accuracy(&ds)?;
    println!("accuracy={:?}", report.accuracy);
    println!("correct={}", report.correct);
    println!("total={}", report.total);
    println!("unseen={}", report.unseen);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn eval_nll(args: EvalNllArgs) -> Result<()> {
    let model = load_model(&args.model_file)?;
    let raw = load_csv(&args.data, args.label_column.as_deref())?;
    let seed = model
        .meta_value("config.seed")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let (ds, offset) = to_model_space(&model, &raw, seed)?;
    let nll = data_nll(&model, &ds, offset)?;
    println!("nll_per_dim={nll:?}");
    if let Some(out) = &args.out {
        let mut comments = model_comments(&args.model_file, &model);
        comments.push(format!("data={}", args.data.display()));
        let mut text = output::comment_block(&comments);
        let _ = writeln!(text, "rows,nll_nat_per_dim\n{},{nll:?}", ds.len());
        output::write_file(out, text.as_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Metric {
    Mmd,
    OneNn,
}

fn eval_two_sample(args: TwoSampleArgs, metric: Metric) -> Result<()> {
    let b = load_csv(&args.b, args.label_column.as_deref())?;
    let mut comments = vec![format!("b={}", args.b.display())];
    let a = match (&args.a, &args.model_file) {
        (Some(path), _) => {
            comments.push(format!("a={}", path.display()));
            load_csv(path, args.label_column.as_deref())?.samples
        }
        (None, Some(path)) => {
            let model = load_model(path)?;
            comments.extend(model_comments(path, &model));
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            to_data_space(&model, model.sample(b.len(), &mut rng)?.0)?
        }
        (None, None) => return Err(CliError::Config("give --a or --model-file".into())),
    };
    let mut text = eval::report_header(&comments).join("\n");
    text.push('\n');
    match metric {
        Metric::Mmd => {
            let m = eval::mmd_gaussian(&a, &b.samples, args.bandwidth)?;
            println!("mmd2={:?}", m.mmd2);
            let _ = writeln!(text, "# bandwidth={}\n# bandwidth_fallback={}", fmt_f64(m.bandwidth), m.bandwidth_fallback);
            let _ = writeln!(text, "mmd2\n{}", fmt_f64(m.mmd2));
        }
        Metric::OneNn => {
            let acc = eval::one_nn_two_sample(&a, &b.samples, args.seed)?;
            println!("onenn_accuracy={acc:?}");
            let _ = writeln!(text, "# seed={}", args.seed);
            let _ = writeln!(text, "onenn_accuracy\n{}", fmt_f64(acc));
        }
    }
    if let Some(out) = &args.out {
        output::write_file(out, text.as_bytes())?;
    }
    Ok(())
}

fn nll_vs_k(args: NllVsKArgs) -> Result<()> {
    let cfg = run_config(&args.model, &args.data)?;
    let ks: Vec<usize> = args
        .ks
        .split(',')
        .map(|s| s.trim().parse().ok().filter(|&k: &usize| k > 0))
        .collect::<Option<_>>()
        .ok_or_else(|| CliError::Config(format!("--ks: expected comma-separated positive integers, got {:?}", args.ks)))?;
    if !(args.train_fraction > 0.0 && args.train_fraction < 1.0) {
        return Err(CliError::Config(format!("--train-fraction must lie in (0, 1), got {}", args.train_fraction)));
    }
    let seed = cfg.settings.em.seed;
    let (raw, _) = load_source(&cfg.data, seed)?;
    let (ds, _) = preprocess_with(&raw, cfg.data.preprocess, seed);
    let (train, held_out) = ds.split(args.train_fraction, seed);
    if train.is_empty() || held_out.is_empty() {
        return Err(CliError::Data(format!("a {} split of {} rows leaves an empty side", args.train_fraction, ds.len())));
    }
    let report = eval::nll_vs_k(&ks, &train, &held_out, |k, d| {
        let mut spec = cfg.settings.spec.clone();
        spec.k = k;
        mixture::fit(&spec, d, &cfg.settings.em)
    })?;
    for (k, nll) in report.held_out() {
        match nll {
            Some(v) => println!("k={k} held_out_nll_per_dim={v:?}"),
            None => println!("k={k} failed"),
        }
    }
    println!("strictly_decreasing={}", report.strictly_decreasing());
    let mut comments = cfg.to_lines();
    comments.push(format!("ks={}", args.ks));
    comments.push(format!("train_fraction={}", args.train_fraction));
    match &args.out {
        Some(out) => output::write_file(out, report.to_csv(&comments).as_bytes()),
        None => Ok(()),
    }
}

