use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use spiketok::checkpoint::{load_checkpoint, serialize_checkpoint};
use spiketok::cues::extract_cues;
use spiketok::encoder::encode_multiscale;
use spiketok::events::{bin_to_frames, parse_event_file, serialize_binary, serialize_csv, synth_moving_bar};
use spiketok::model::{infer as run_inference, ForwardOptions, Model};
use spiketok::neuron::NeuronPriors;
use spiketok::opcount::{count_ops, loglog_slope, measured_report, SCALING_STAGE};
use spiketok::pgm::{encode_pgm, to_gray};
use spiketok::selftest::run_selftest;
use spiketok::tensor::SpikeTensor;
use spiketok::train::{history_csv, task_events, train_synthetic, Dataset, Task};
use spiketok::variance::dataset_variance;

use crate::{CliError, Context, Stage};

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|err| CliError::Io {
        path: dir.to_path_buf(),
        err,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|err| CliError::Io {
        path: path.clone(),
        err,
    })?;
    Ok(path)
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|err| CliError::Io {
        path: path.to_path_buf(),
        err,
    })
}

fn model(ctx: &Context, checkpoint: Option<&Path>) -> Result<Model, CliError> {
    match checkpoint {
        Some(path) => load_checkpoint(path).stage("checkpoint"),
        None => Model::init(ctx.config.model.clone(), ctx.config.seed).stage("model init"),
    }
}

fn options(ctx: &Context) -> ForwardOptions {
    ForwardOptions {
        fixed_k: ctx.config.train.fixed_k,
        ablation: ctx.config.train.ablation,
    }
}

fn load_frames(path: &Path, model: &Model) -> Result<SpikeTensor, CliError> {
    let stream = parse_event_file(&read(path)?).stage("events")?;
    let c = &model.config;
    bin_to_frames(&stream, c.timesteps, c.height, c.width).stage("binning")
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "sample".into(), |s| s.to_string_lossy().into_owned())
}

/// Event files named directly, plus every `.spk`/`.csv` file inside named
/// directories in name order. `labels.csv` is skipped.
fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|err| CliError::Io { path: p.clone(), err })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let ext = f.extension().and_then(|e| e.to_str());
                    matches!(ext, Some("spk" | "csv")) && f.file_name().is_some_and(|n| n != "labels.csv")
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

pub fn synth(ctx: &Context, task: Option<&str>, csv: bool) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let s = &cfg.synth;
    let task = task.map(|t| t.parse::<Task>()).transpose().stage("synth")?;
    let ext = if csv { "csv" } else { "spk" };
    let mut labels = String::from("file,label\n");
    for i in 0..s.samples {
        let seed = cfg.seed.wrapping_add(i as u64);
        let (name, stream) = match task {
            None => {
                let stream = synth_moving_bar(
                    s.width,
                    s.height,
                    s.velocity_px_per_s,
                    s.duration_us,
                    s.noise_rate_hz,
                    seed,
                )
                .stage("synth")?;
                (format!("bar_{i:03}.{ext}"), stream)
            }
            Some(task) => {
                let label = i % task.classes();
                let m = &cfg.model;
                let stream =
                    task_events(task, label, m.width as u16, m.height as u16, m.timesteps, seed).stage("synth")?;
                let name = format!("{task}_{i:03}.{ext}");
                let _ = writeln!(labels, "{name},{label}");
                (name, stream)
            }
        };
        if csv {
            write(&ctx.out, &name, serialize_csv(&stream))?;
        } else {
            write(&ctx.out, &name, serialize_binary(&stream))?;
        }
    }
    if task.is_some() {
        write(&ctx.out, "labels.csv", labels)?;
    }
    println!("wrote {} recordings to {}", s.samples, ctx.out.display());
    Ok(())
}

pub fn encode(ctx: &Context, input: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let model = model(ctx, checkpoint)?;
    let frames = load_frames(input, &model)?;
    let (tokens, spikes) = encode_multiscale(&frames, &model.encoder).stage("encoder")?;
    let cues = extract_cues(&spikes, (1, 1)).stage("cues")?;
    let cols = cues.grid.1;
    let mut out = String::from("index,row,col,t_first,t_interval,t_burst,f_rate\n");
    for i in 0..cues.len() {
        let _ = writeln!(
            out,
            "{i},{},{},{:?},{:?},{:?},{:?}",
            i / cols,
            i % cols,
            cues.t_first[i],
            cues.t_interval[i],
            cues.t_burst[i],
            cues.f_rate[i]
        );
    }
    let path = write(&ctx.out, &format!("{}_cues.csv", stem(input)), out)?;
    let (tv, iv) = cues.timing_variance();
    println!(
        "tokens={} dim={} grid={}x{} input_spikes={} encoder_spikes={} timing_variance={tv:.6} interval_variance={iv:.6}",
        tokens.n,
        tokens.d,
        cues.grid.0,
        cues.grid.1,
        frames.count_ones(),
        spikes.count_ones()
    );
    println!("cues: {}", path.display());
    Ok(())
}

pub fn infer(ctx: &Context, input: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let model = model(ctx, checkpoint)?;
    let frames = load_frames(input, &model)?;
    let inf = run_inference(&model, &frames, options(ctx)).stage("inference")?;
    let d = &inf.decision;
    let report = measured_report(&model.config, d.k, &inf.macs).stage("op count")?;
    let name = stem(input);
    write(&ctx.out, &format!("{name}_scores.csv"), d.to_csv())?;
    write(&ctx.out, &format!("{name}_opcount.csv"), report.to_csv())?;
    let logits: Vec<String> = inf.logits.iter().map(|l| format!("{l:.6}")).collect();
    println!("class={} logits=[{}]", inf.predicted, logits.join(", "));
    println!(
        "predicted_rho={:.4} sparsity={:.1}% K={} N={}",
        d.rho,
        100.0 * d.sparsity(),
        d.k,
        d.n()
    );
    println!("{}", report.summary());
    Ok(())
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let outcome = train_synthetic(&ctx.config).stage("train")?;
    write(&ctx.out, "history.csv", history_csv(&outcome.history))?;
    let ckpt = write(&ctx.out, "model.ckpt", serialize_checkpoint(&outcome.model))?;
    if let Some(m) = outcome.final_test() {
        println!(
            "task={} epochs={} test_accuracy={:.4} mean_sparsity={:.4} mean_K={:.2}",
            ctx.config.train.task, ctx.config.train.epochs, m.accuracy, m.mean_rho, m.mean_k
        );
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

pub fn profile(ctx: &Context, sweep: &[usize], samples: usize, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let model = model(ctx, checkpoint)?;
    let cfg = &model.config;
    let n = cfg.tokens();
    let sweep = if sweep.is_empty() {
        let mut v: Vec<usize> = [n / 8, n / 4, n / 2, n].into_iter().filter(|&k| k >= 1).collect();
        v.dedup();
        v
    } else {
        sweep.to_vec()
    };
    if let Some(&k) = sweep.iter().find(|&&k| k == 0 || k > n) {
        return Err(CliError::Usage(format!("sweep value {k} outside [1, N = {n}]")));
    }
    let mut table = String::from("K,attention_macs,total_macs\n");
    let mut points = Vec::new();
    println!("{:>6} {:>16} {:>16}", "K", "attention_macs", "total_macs");
    for &k in &sweep {
        let r = count_ops(cfg, k).stage("op count")?;
        let a = r.stage_macs(SCALING_STAGE);
        println!("{k:>6} {a:>16} {:>16}", r.total());
        let _ = writeln!(table, "{k},{a},{}", r.total());
        points.push((k as f64, a as f64));
    }
    write(&ctx.out, "profile.csv", table)?;
    match loglog_slope(&points) {
        Some(s) => println!("attention log-log slope = {s:.3}"),
        None => {
            eprintln!("warning: slope needs at least two distinct K values");
            println!("attention log-log slope = undefined");
        }
    }
    if samples > 0 {
        let data = Dataset::generate(ctx.config.train.task, samples, cfg, ctx.config.seed).stage("synth")?;
        let mut total = 0.0;
        for f in &data.frames {
            let inf = run_inference(&model, f, options(ctx)).stage("inference")?;
            total += inf.decision.sparsity();
        }
        println!(
            "mean sparsity over {samples} {} samples = {:.1}%",
            ctx.config.train.task,
            100.0 * total / samples as f64
        );
    }
    Ok(())
}

pub fn variance(ctx: &Context, inputs: &[PathBuf], compare: bool, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let model = model(ctx, checkpoint)?;
    let files = collect_inputs(inputs)?;
    let frames: Vec<SpikeTensor> = files.iter().map(|f| load_frames(f, &model)).collect::<Result<_, _>>()?;
    let report = dataset_variance(&model.encoder, &frames).stage("variance")?;
    let mut csv = String::from("encoder,samples,timing_variance,interval_variance\n");
    println!(
        "samples={} timing_variance={:.6} interval_variance={:.6}",
        report.samples, report.timing, report.interval
    );
    let _ = writeln!(
        csv,
        "configured,{},{:?},{:?}",
        report.samples, report.timing, report.interval
    );
    if compare {
        let mut cfg = model.config.clone();
        cfg.priors = NeuronPriors {
            sigma_tau: 0.0,
            sigma_vth: 0.0,
            ..cfg.priors
        };
        let hom = Model::init(cfg, ctx.config.seed).stage("model init")?;
        let r = dataset_variance(&hom.encoder, &frames).stage("variance")?;
        println!(
            "homogeneous timing_variance={:.6} interval_variance={:.6}",
            r.timing, r.interval
        );
        let _ = writeln!(csv, "homogeneous,{},{:?},{:?}", r.samples, r.timing, r.interval);
    }
    write(&ctx.out, "variance.csv", csv)?;
    Ok(())
}

pub fn dump_maps(ctx: &Context, inputs: &[PathBuf], checkpoint: Option<&Path>) -> Result<(), CliError> {
    let model = model(ctx, checkpoint)?;
    for input in collect_inputs(inputs)? {
        let frames = load_frames(&input, &model)?;
        let inf = run_inference(&model, &frames, options(ctx)).stage("inference")?;
        let (rows, cols) = inf.cues.grid;
        let name = stem(&input);
        let image = |values: &[f64]| encode_pgm(cols, rows, &to_gray(values)).stage("image");

        write(&ctx.out, &format!("{name}_rate.pgm"), image(&inf.cues.f_rate)?)?;
        write(
            &ctx.out,
            &format!("{name}_attention.pgm"),
            image(&inf.attention_received)?,
        )?;
        let mut mask = vec![0u8; rows * cols];
        for (i, &keep) in inf.decision.mask.iter().enumerate() {
            if keep {
                mask[inf.sources[i]] = 255;
            }
        }
        write(
            &ctx.out,
            &format!("{name}_mask.pgm"),
            encode_pgm(cols, rows, &mask).stage("image")?,
        )?;

        let (_, spikes) = encode_multiscale(&frames, &model.encoder).stage("encoder")?;
        let mut curve = String::from("t,input_events,encoder_spikes\n");
        for t in 0..frames.timesteps() {
            let count = |s: &SpikeTensor| s.frame(t).iter().filter(|&&b| b != 0).count();
            let _ = writeln!(curve, "{t},{},{}", count(&frames), count(&spikes));
        }
        write(&ctx.out, &format!("{name}_spikes.csv"), curve)?;
        println!("{name}: grid {rows}x{cols}, K={}", inf.decision.k);
    }
    Ok(())
}

pub fn selftest(filter: Option<&str>, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let mut failed = 0;
    if let Some(path) = checkpoint {
        match load_checkpoint(path) {
            Ok(m) => println!(
                "PASS checkpoint.load  {} ({} parameters)",
                path.display(),
                spiketok::params::Blocks::param_count(&m)
            ),
            Err(e) => {
                println!("FAIL checkpoint.load  {}: {e}", path.display());
                failed += 1;
            }
        }
    }
    let results = run_selftest(filter);
    let mut total = std::time::Duration::ZERO;
    for r in &results {
        total += r.elapsed;
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<30} {:>9.3} ms  {}",
            r.name,
            r.elapsed.as_secs_f64() * 1e3,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    println!(
        "{}/{} checks passed in {:.2} s",
        results.iter().filter(|r| r.passed).count(),
        results.len(),
        total.as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::SelftestFailed(failed));
    }
    Ok(())
}
