use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use scaa_core::gradcheck::CheckConfig;
use scaa_core::io::{self, Checkpoint, Echo, Payload, VolumeHeader};
use scaa_core::memest::{self, ArchSpec};
use scaa_core::model::{count_parameters, AttentionRecord};
use scaa_core::synth::{generate_dataset, AugmentConfig, PhantomSpec, VolumeSample};
use scaa_core::train::{self, LogRow, TrainConfig, TrainState};
use scaa_core::{metrics, Error, ScaaConfig, ScaaModel, TensorError, Variant};

use crate::{
    AblateArgs, AttnArgs, EvalArgs, GenArgs, GradcheckArgs, InferArgs, MemestArgs, Preset,
    TrainArgs, TrainOpts,
};

pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn load_dir(dir: &Path) -> Result<Vec<(String, VolumeSample)>, Failure> {
    let bases = io::volume::list_volumes(dir)?;
    if bases.is_empty() {
        return Err(Failure::Runtime(format!(
            "{}: no volumes found",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(bases.len());
    for base in bases {
        let stem = base
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((stem, io::read_volume(&base)?));
    }
    let classes = out[0].1.num_classes;
    if let Some((stem, _)) = out.iter().find(|(_, s)| s.num_classes != classes) {
        return Err(Failure::Runtime(format!(
            "{stem}: class count differs from the rest of {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn preset_config(preset: Preset, classes: usize) -> ScaaConfig {
    match preset {
        Preset::Micro => ScaaConfig::micro(classes),
        Preset::Desk => ScaaConfig::desk(classes),
        Preset::Full => ScaaConfig::full(classes),
    }
}

fn config_for(opts: &TrainOpts, classes: usize) -> ScaaConfig {
    let c = preset_config(opts.model, classes);
    match opts.variant {
        Some(v) => c.with_variant(v.into()),
        None => c,
    }
}

fn check_shapes(config: &ScaaConfig, data: &[(String, VolumeSample)]) -> Outcome {
    let m = config.volume_multiple();
    for (stem, s) in data {
        if s.shape.iter().any(|&e| e % m != 0) {
            return Err(Failure::Runtime(format!(
                "{stem}: shape {:?} is not a multiple of {m} on every axis",
                s.shape
            )));
        }
    }
    Ok(())
}

fn train_config(opts: &TrainOpts) -> Result<TrainConfig, Failure> {
    if !(opts.lr.is_finite() && opts.lr >= 0.0) {
        return Err(usage(format!(
            "--lr must be finite and >= 0, got {}",
            opts.lr
        )));
    }
    if opts.slices == 0 {
        return Err(usage("--slices must be >= 1"));
    }
    if opts.epochs == 0 {
        return Err(usage("--epochs must be >= 1"));
    }
    Ok(TrainConfig {
        lr: opts.lr,
        epochs: opts.epochs,
        max_steps: opts.steps,
        slices: opts.slices,
        seed: opts.seed,
        augment: (!opts.no_augment).then(AugmentConfig::default),
        record_wall_time: opts.record_wall_time,
        ..Default::default()
    })
}

fn load_model(path: &Path) -> Result<(ScaaModel, TrainState<f32>, Checkpoint), Failure> {
    let ckpt = io::read_checkpoint(path)?;
    let (model, store) = ScaaModel::init::<f32>(ckpt.config.clone(), 0)?;
    let mut state = TrainState::new(store);
    ckpt.restore(&mut state)?;
    Ok((model, state, ckpt))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

pub fn gen(a: &GenArgs, echo: &Echo) -> Outcome {
    if a.count == 0 {
        return Err(usage("--count must be >= 1"));
    }
    let spec = match (&a.config, a.micro) {
        (Some(_), true) => return Err(usage("--config and --micro are mutually exclusive")),
        (Some(p), false) => PhantomSpec::parse(&read_text(p)?)?,
        (None, true) => PhantomSpec::micro(),
        (None, false) => PhantomSpec::default(),
    }
    .with_seed(a.seed);
    spec.validate()?;
    let data = generate_dataset(&spec, a.count)?;
    for (i, s) in data.iter().enumerate() {
        io::write_volume(&a.out.join(format!("case{i:03}")), s, echo)?;
    }
    io::write_text(&a.out.join("phantom.cfg"), echo, &spec.to_config())?;
    println!(
        "wrote {} volumes of shape {:?} to {}",
        data.len(),
        spec.shape,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs, echo: &Echo) -> Outcome {
    let cfg = train_config(&a.opts)?;
    if a.checkpoint_every == Some(0) {
        return Err(usage("--checkpoint-every must be >= 1"));
    }
    let data = load_dir(&a.data)?;
    let classes = data[0].1.num_classes;
    let (config, mut state) = match &a.checkpoint {
        Some(p) => {
            let (model, state, _) = load_model(p)?;
            if let Some(v) = a.opts.variant {
                if Variant::from(v) != model.config.variant {
                    return Err(usage(format!(
                        "--variant conflicts with checkpoint variant {}",
                        model.config.variant
                    )));
                }
            }
            (model.config, state)
        }
        None => {
            let config = config_for(&a.opts, classes);
            let (_, store) = ScaaModel::init::<f32>(config.clone(), a.opts.seed)?;
            (config, TrainState::new(store))
        }
    };
    if config.num_classes != classes {
        return Err(Failure::Runtime(format!(
            "model predicts {} classes, data has {classes}",
            config.num_classes
        )));
    }
    check_shapes(&config, &data)?;
    let model = ScaaModel::init::<f32>(config.clone(), 0)?.0;
    let samples: Vec<VolumeSample> = data.into_iter().map(|(_, s)| s).collect();
    let end = train::total_steps(&cfg, samples.len());
    println!(
        "training {} ({} parameters) on {} volumes, steps {}..{}",
        config.variant.label(),
        count_parameters(&config),
        samples.len(),
        state.step,
        end
    );
    let meta: BTreeMap<String, String> = echo.clone();
    let rows = train::train(&model, &mut state, &samples, &cfg, |st, row| {
        if row.step % 10 == 0 || row.step == end {
            println!(
                "step {:>5}  l2d {:.5}  l3d {:.5}  total {:.5}",
                row.step, row.l2d, row.l3d, row.total
            );
        }
        if let Some(every) = a.checkpoint_every {
            if row.step % every == 0 {
                let c = Checkpoint::capture(&config, st, meta.clone());
                io::write_checkpoint(&a.out.join(format!("step_{}.ckpt", row.step)), &c)?;
            }
        }
        Ok(())
    })?;
    io::write_checkpoint(
        &a.out.join("model.ckpt"),
        &Checkpoint::capture(&config, &state, meta),
    )?;
    io::write_text(&a.out.join("train_log.csv"), echo, &io::log_csv(&rows))?;
    println!("wrote {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn metric_rows(out: &mut String, stem: &str, report: &metrics::MetricReport) {
    for c in &report.classes {
        let _ = writeln!(out, "{stem},{},{:.6},{}", c.class, c.dsc, fmt_opt(c.hd95));
    }
    let _ = writeln!(
        out,
        "{stem},mean,{:.6},{}",
        report.mean_dsc(),
        fmt_opt(report.mean_hd95())
    );
}

const METRIC_HEADER: &str = "volume,class,dsc_percent,hd95\n";

pub fn infer(a: &InferArgs, echo: &Echo) -> Outcome {
    let (model, state, _) = load_model(&a.checkpoint)?;
    let data = load_dir(&a.data)?;
    check_shapes(&model.config, &data)?;
    let window = TrainConfig::default().window;
    let mut csv = String::from(METRIC_HEADER);
    let mut total = 0.0;
    for (stem, sample) in &data {
        let inf = train::infer(&model, &state.store, sample, window, true)?;
        let header = VolumeHeader {
            version: io::volume::VOLUME_VERSION,
            id: sample.id.clone(),
            dims: sample.shape,
            spacing: sample.spacing,
            dtype: "u8".into(),
            num_classes: sample.num_classes,
            meta: echo.clone(),
        };
        io::write_array(&a.out.join(format!("{stem}.lbl")), &header, &inf.labels)?;
        let report = inf.report.expect("metrics requested");
        println!("{stem}: mean DSC {:.2}%", report.mean_dsc());
        total += report.mean_dsc();
        metric_rows(&mut csv, stem, &report);
    }
    io::write_text(&a.out.join("metrics.csv"), echo, &csv)?;
    println!(
        "mean DSC over {} volumes: {:.2}%",
        data.len(),
        total / data.len() as f64
    );
    Ok(())
}

pub fn eval(a: &EvalArgs, echo: &Echo) -> Outcome {
    let data = load_dir(&a.data)?;
    let mut csv = String::from(METRIC_HEADER);
    for (stem, truth) in &data {
        let (header, payload) = io::read_array(&a.pred.join(format!("{stem}.lbl")))?;
        if header.dims != truth.shape {
            return Err(Error::DimMismatch(format!(
                "{stem}: prediction {:?} vs reference {:?}",
                header.dims, truth.shape
            ))
            .into());
        }
        let Payload::U8(pred) = payload else {
            return Err(Failure::Runtime(format!(
                "{stem}: prediction must be u8 labels"
            )));
        };
        let report = metrics::evaluate(
            &pred,
            &truth.labels,
            truth.shape,
            truth.num_classes,
            truth.spacing,
        )?;
        println!("{stem}: mean DSC {:.2}%", report.mean_dsc());
        metric_rows(&mut csv, stem, &report);
    }
    io::write_text(&a.out.join("metrics.csv"), echo, &csv)?;
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, echo: &Echo) -> Outcome {
    if a.samples == 0 || a.slices == 0 {
        return Err(usage("--samples and --slices must be >= 1"));
    }
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(usage("--tol must be > 0"));
    }
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(usage("--step must be a positive number"));
    }
    let spec = match a.model {
        Preset::Micro => PhantomSpec::micro(),
        _ => PhantomSpec::default(),
    }
    .with_seed(a.seed);
    let sample = scaa_core::synth::generate(&spec)?;
    let mut config = preset_config(a.model, sample.num_classes);
    if let Some(v) = a.variant {
        config = config.with_variant(v.into());
    }
    let (model, store) = ScaaModel::init::<f64>(config, a.seed)?;
    let d = sample.shape[0];
    let n = a.slices.min(d);
    let slices: Vec<usize> = (0..n).map(|k| (2 * k + 1) * d / (2 * n)).collect();
    let cc = CheckConfig {
        samples_per_tensor: a.samples,
        step: a.step,
        seed: a.seed,
        ..Default::default()
    };
    let window = TrainConfig::default().window;
    let report = train::grad_check(
        &model,
        &store,
        &sample,
        &slices,
        &Default::default(),
        window,
        &cc,
    )?;
    let mut csv = String::from("tensor,checked,kinks,max_rel_err,analytic,numeric\n");
    for t in &report.tensors {
        let _ = writeln!(
            csv,
            "{},{},{},{:.3e},{:.6e},{:.6e}",
            t.name, t.checked, t.kinks, t.max_rel_err, t.analytic_at_worst, t.numeric_at_worst
        );
    }
    if let Some(out) = &a.out {
        io::write_text(&out.join("gradcheck.csv"), echo, &csv)?;
    }
    let failures = report.failures(a.tol);
    for t in &failures {
        println!("FAIL {} max rel err {:.3e}", t.name, t.max_rel_err);
    }
    println!(
        "{} tensors, {} coordinates, max rel err {:.3e} (tol {:.0e})",
        report.tensors.len(),
        report.checked(),
        report.max_rel_err(),
        a.tol
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} tensors above tolerance",
            failures.len()
        )))
    }
}

pub fn memest(a: &MemestArgs, echo: &Echo) -> Outcome {
    if a.batch == 0 {
        return Err(usage("--batch must be >= 1"));
    }
    let spec = match (&a.config, &a.arch) {
        (Some(_), Some(_)) => return Err(usage("--config and --arch are mutually exclusive")),
        (Some(p), None) => {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Some(ArchSpec::parse(&name, &read_text(p)?)?)
        }
        (None, Some(name)) => {
            if !memest::BUILTINS.contains(&name.as_str()) {
                return Err(usage(format!(
                    "unknown --arch '{name}' (known: {})",
                    memest::BUILTINS.join(", ")
                )));
            }
            Some(memest::builtin_arch(name, a.batch)?)
        }
        (None, None) => None,
    };
    match spec {
        Some(spec) => {
            let report = memest::estimate(&spec)?;
            if a.layers {
                print!("{}", report.to_table());
            }
            println!(
                "{} batch {}: {:.3} GiB activations+gradients ({} bytes), {} parameters",
                report.name,
                report.batch,
                report.gib(),
                report.bytes(),
                report.params()
            );
            if let Some(out) = &a.out {
                io::write_text(
                    &out.join(format!("memest_{}.csv", report.name)),
                    echo,
                    &report.to_csv(),
                )?;
            }
        }
        None => {
            let rows = memest::reference_table()?;
            print!("{}", memest::table_text(&rows));
            if let Some(out) = &a.out {
                io::write_text(&out.join("memest.csv"), echo, &memest::table_csv(&rows))?;
            }
        }
    }
    Ok(())
}

/// Mean attention mass near each slice's matching depth index at `scale`,
/// and the uniform baseline `3 / D`.
pub fn locality(
    records: &[AttentionRecord],
    config: &ScaaConfig,
    scale: usize,
) -> Option<(f64, f64)> {
    let s = scale - 2;
    let picked: Vec<&AttentionRecord> = records.iter().filter(|r| r.scale == scale).collect();
    if picked.is_empty() {
        return None;
    }
    let depth = picked[0].weights.len();
    let mass: f64 = picked
        .iter()
        .map(|r| r.mass_near(config.center_index(r.slice_z, s, depth), 3))
        .sum::<f64>()
        / picked.len() as f64;
    Some((mass, 3.0_f64.min(depth as f64) / depth as f64))
}

pub fn attn_export(a: &AttnArgs, echo: &Echo) -> Outcome {
    let (model, state, _) = load_model(&a.checkpoint)?;
    let data = load_dir(&a.data)?;
    let Some((stem, sample)) = data.get(a.volume) else {
        return Err(usage(format!(
            "--volume {} out of range ({} volumes)",
            a.volume,
            data.len()
        )));
    };
    check_shapes(&model.config, std::slice::from_ref(&data[a.volume]))?;
    let inf = train::infer(
        &model,
        &state.store,
        sample,
        TrainConfig::default().window,
        false,
    )?;
    if inf.attention.is_empty() {
        println!(
            "{} has no attention; wrote an empty table",
            model.config.variant.label()
        );
    }
    io::write_text(
        &a.out.join("attention.csv"),
        echo,
        &io::attention_csv(&inf.attention),
    )?;
    println!("{stem}: {} attention vectors", inf.attention.len());
    if let Some((mass, base)) = locality(&inf.attention, &model.config, 2) {
        println!("scale 2 locality: mass on 3 nearest positions {mass:.4} vs uniform {base:.4}");
    }
    Ok(())
}

/// Fraction of slices whose attention vectors all have positive entropy,
/// and whether every vector is one-hot.
pub fn attention_stats(records: &[AttentionRecord]) -> (f64, bool) {
    let mut per_slice: BTreeMap<(usize, usize), bool> = BTreeMap::new();
    let mut volume = 0;
    let mut last_z = None;
    for r in records {
        if last_z.is_some_and(|z| r.slice_z < z) {
            volume += 1;
        }
        last_z = Some(r.slice_z);
        let e = per_slice.entry((volume, r.slice_z)).or_insert(true);
        *e &= r.entropy() > 0.0;
    }
    let positive =
        per_slice.values().filter(|&&v| v).count() as f64 / per_slice.len().max(1) as f64;
    (
        positive,
        !records.is_empty() && records.iter().all(AttentionRecord::is_one_hot),
    )
}

pub fn ablate(a: &AblateArgs, echo: &Echo) -> Outcome {
    let cfg = train_config(&a.opts)?;
    if a.opts.variant.is_some() {
        return Err(usage("ablate trains every variant; drop --variant"));
    }
    let data = load_dir(&a.data)?;
    let held = match &a.eval {
        Some(dir) => load_dir(dir)?,
        None => data.clone(),
    };
    let classes = data[0].1.num_classes;
    if held[0].1.num_classes != classes {
        return Err(Failure::Runtime(
            "evaluation data has a different class count".into(),
        ));
    }
    let samples: Vec<VolumeSample> = data.iter().map(|(_, s)| s.clone()).collect();
    let mut csv = String::from("variant,params,steps,final_loss,mean_dsc,mean_hd95");
    for c in 1..=classes {
        let _ = write!(csv, ",dsc_{c}");
    }
    csv.push_str(",attention_vectors,one_hot,entropy_positive_slices\n");
    let mut table = format!(
        "{:<7} {:>9} {:>6} {:>10} {:>9} {:>9} {:>8} {:>9}\n",
        "variant", "params", "steps", "loss", "DSC%", "HD95", "one-hot", "H>0"
    );
    for v in Variant::ALL {
        let config = preset_config(a.opts.model, classes).with_variant(v);
        check_shapes(&config, &data)?;
        check_shapes(&config, &held)?;
        let (model, store) = ScaaModel::init::<f32>(config.clone(), a.opts.seed)?;
        let mut state = TrainState::new(store);
        println!("== {}", v.label());
        let rows: Vec<LogRow> = train::train(&model, &mut state, &samples, &cfg, |_, row| {
            if row.step % 10 == 0 {
                println!("step {:>5}  total {:.5}", row.step, row.total);
            }
            Ok(())
        })?;
        io::write_text(
            &a.out.join(format!("log_{}.csv", v.as_str())),
            echo,
            &io::log_csv(&rows),
        )?;
        let tail = &rows[rows.len().saturating_sub(10)..];
        let final_loss = tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64;

        let mut reports = Vec::new();
        let mut attention = Vec::new();
        for (i, (_, sample)) in held.iter().enumerate() {
            let inf = train::infer(&model, &state.store, sample, cfg.window, true)?;
            reports.push(inf.report.expect("metrics requested"));
            if i == 0 && v.fuses() {
                io::write_text(
                    &a.out.join(format!("attention_{}.csv", v.as_str())),
                    echo,
                    &io::attention_csv(&inf.attention),
                )?;
            }
            attention.extend(inf.attention);
        }
        let n = reports.len() as f64;
        let mean_dsc = reports.iter().map(|r| r.mean_dsc()).sum::<f64>() / n;
        let hds: Vec<f64> = reports.iter().filter_map(|r| r.mean_hd95()).collect();
        let mean_hd = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
        let (positive, one_hot) = attention_stats(&attention);
        let _ = write!(
            csv,
            "{},{},{},{:.6},{:.6},{}",
            v.as_str(),
            count_parameters(&config),
            rows.len(),
            final_loss,
            mean_dsc,
            fmt_opt(mean_hd)
        );
        for c in 0..classes {
            let d = reports.iter().map(|r| r.classes[c].dsc).sum::<f64>() / n;
            let _ = write!(csv, ",{d:.6}");
        }
        let _ = writeln!(
            csv,
            ",{},{},{:.6}",
            attention.len(),
            one_hot as u8,
            positive
        );
        let _ = writeln!(
            table,
            "{:<7} {:>9} {:>6} {:>10.5} {:>9.2} {:>9} {:>8} {:>8.1}%",
            v.label(),
            count_parameters(&config),
            rows.len(),
            final_loss,
            mean_dsc,
            mean_hd.map_or("-".into(), |h| format!("{h:.2}")),
            if attention.is_empty() {
                "-"
            } else if one_hot {
                "yes"
            } else {
                "no"
            },
            positive * 100.0
        );
    }
    io::write_text(&a.out.join("ablation.csv"), echo, &csv)?;
    print!("{table}");
    Ok(())
}
