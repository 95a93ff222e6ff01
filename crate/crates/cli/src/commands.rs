use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mbt::analysis::{
    attention_rollout, count_flops, cross_modal_reachability, fusion_sweep, probe_agrees, rollout_curve,
    rollout_curve_csv, sweep_csv, to_pgm,
};
use mbt::data::{gen_synthetic_av, Dataset, SynthConfig};
use mbt::dsp::{Modality, Tokenizer};
use mbt::model::{init_params, ForwardOptions, ModelInputs, Strategy};
use mbt::tensor::{primitive_suite, Graph, Tensor};
use mbt::train::{
    batch_inputs, evaluate, load_model, metrics_csv, one_hot, save_model, train, window_tokens, EvalReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::run_config::RunConfig;
use crate::{Cli, Command};

pub const MANIFEST: &str = "manifest.toml";

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

fn prepare_out(common: &crate::Common) -> Result<PathBuf> {
    let out = match (&common.output_root, common.out.is_relative()) {
        (Some(root), true) => root.join(&common.out),
        _ => common.out.clone(),
    };
    if out.exists() {
        let busy = fs::read_dir(&out).with_context(|| format!("reading {}", out.display()))?.next().is_some();
        if busy && !common.force {
            bail!("output directory {} is not empty (pass --force to reuse it)", out.display());
        }
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Tokenize { .. } => "tokenize",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Flops { .. } => "flops",
        Command::Rollout { .. } => "rollout",
        Command::Reach { .. } => "reach",
        Command::Gradcheck { .. } => "gradcheck",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let text = cli
        .common
        .config
        .as_ref()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())))
        .transpose()?;
    let mut overrides = cli.common.overrides.clone();
    if let Some(s) = cli.common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(t) = &cli.common.task {
        overrides.push(format!("data.task={t}"));
    }
    let mut cfg = RunConfig::resolve(&cli.common.preset, text.as_deref(), &overrides)?.seeded();
    cfg.command = Some(command_name(&cli.command).to_string());
    let out = prepare_out(&cli.common)?;
    let run = Run { cfg, out };
    run.write(MANIFEST, run.cfg.to_toml())?;
    match cli.command {
        Command::GenData => gen_data(&run),
        Command::Tokenize { data } => tokenize(&run, &data),
        Command::Train { data } => train_cmd(&run, data.as_deref()),
        Command::Eval { model, data } => eval_cmd(&run, &model, &data),
        Command::Flops { sweep } => flops(&run, sweep.as_deref()),
        Command::Rollout { model, data, index } => rollout(&run, model.as_deref(), data.as_deref(), index),
        Command::Reach { probe } => reach(&run, probe),
        Command::Gradcheck { eps, tol } => gradcheck(&run, eps, tol),
    }
}

fn synth_config(cfg: &RunConfig) -> SynthConfig {
    let mut s = SynthConfig::for_tokenizer(&cfg.model.tokenizer, cfg.data.classes, cfg.data.task);
    if cfg.data.duration_s > 0.0 {
        s.duration_s = cfg.data.duration_s;
    }
    s
}

/// Train and test splits; the test split uses an independent stream.
fn synthesize(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let s = synth_config(cfg);
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    r.set_stream(10);
    let train = gen_synthetic_av(&s, cfg.data.n_train, "train", &mut r)?;
    r.set_stream(11);
    let test = gen_synthetic_av(&s, cfg.data.n_test, "test", &mut r)?;
    Ok((train, test))
}

fn gen_data(run: &Run) -> Result<()> {
    let (train, test) = synthesize(&run.cfg).context("gen-data")?;
    train.save(&run.out.join("train"))?;
    test.save(&run.out.join("test"))?;
    println!("wrote {} train and {} test clips to {}", train.len(), test.len(), run.out.display());
    Ok(())
}

fn tokenize(run: &Run, data: &Path) -> Result<()> {
    let ds = Dataset::load(data).context("tokenize: loading dataset")?;
    let tok = Tokenizer::new(run.cfg.model.tokenizer.clone())?;
    let model = init_params(&run.cfg.model, &mut ChaCha8Rng::seed_from_u64(run.cfg.seed))?;
    let mut csv = String::from("id,rgb_tokens,rgb_dim,spec_tokens,spec_dim\n");
    for clip in &ds.clips {
        let w = window_tokens(&model, &tok, clip, 0.0).context("tokenize")?;
        let dims = |t: &Option<Tensor>| t.as_ref().map_or((0, 0), |t| (t.shape()[0], t.shape()[1]));
        let ((nr, pr), (ns, ps)) = (dims(&w.rgb), dims(&w.spec));
        let _ = writeln!(csv, "{},{nr},{pr},{ns},{ps}", clip.id);
    }
    run.write("tokens.csv", csv)?;
    if let Some(first) = ds.clips.first() {
        let spec = tok.spectrogram(&first.waveform)?;
        let floor = spec.mels.data().iter().copied().fold(f64::INFINITY, f64::min);
        run.write("spectrogram.pgm", to_pgm(&spec.mels.map(|v| v - floor))?)?;
    }
    println!("tokenized {} clips", ds.len());
    Ok(())
}

fn load_splits(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = Dataset::load(&dir.join("train")).context("loading train split")?;
    let test = Dataset::load(&dir.join("test")).context("loading test split")?;
    Ok((train, test))
}

fn report_text(r: &EvalReport, seed: u64) -> String {
    let mut s = format!("seed = {seed}\nloss = {}\n", r.loss);
    for (k, v) in [("top1", r.top1), ("top5", r.top5), ("map", r.map)] {
        if let Some(v) = v {
            let _ = writeln!(s, "{k} = {v}");
        }
    }
    s
}

fn train_cmd(run: &Run, data: Option<&Path>) -> Result<()> {
    let (train_set, test_set) = match data {
        Some(d) => load_splits(d)?,
        None => synthesize(&run.cfg)?,
    };
    for w in run.cfg.model.warnings() {
        eprintln!("warning: {w}");
    }
    let out = train(&run.cfg.model, &run.cfg.train, &train_set, Some(&test_set), |r| {
        eprintln!("epoch {:>3} {:<6} loss {:.4} top1 {}", r.epoch, r.split, r.loss, r.top1.map_or("-".into(), |v| format!("{v:.4}")));
    })
    .context("train")?;
    run.write("metrics.csv", metrics_csv(&out.log))?;
    save_model(&out.model, &run.out.join("model"))?;
    let tok = Tokenizer::new(run.cfg.model.tokenizer.clone())?;
    let r = evaluate(&out.model, &tok, &test_set, run.cfg.train.eval_crops, 64)?;
    run.write("report.txt", report_text(&r, run.cfg.seed))?;
    print!("{}", report_text(&r, run.cfg.seed));
    Ok(())
}

fn eval_cmd(run: &Run, model: &Path, data: &Path) -> Result<()> {
    let m = load_model(model).context("eval: loading model")?;
    let ds = Dataset::load(data).context("eval: loading dataset")?;
    let tok = Tokenizer::new(m.config.tokenizer.clone())?;
    let r = evaluate(&m, &tok, &ds, run.cfg.train.eval_crops, 64).context("eval")?;
    let mut csv = String::from("id");
    for h in 0..r.scores.len() {
        for c in 0..r.scores[h].shape()[1] {
            let _ = write!(csv, ",h{h}c{c}");
        }
    }
    csv.push('\n');
    for (i, clip) in ds.clips.iter().enumerate() {
        csv.push_str(&clip.id);
        for s in &r.scores {
            for v in s.row(i) {
                let _ = write!(csv, ",{v}");
            }
        }
        csv.push('\n');
    }
    run.write("scores.csv", csv)?;
    run.write("report.txt", report_text(&r, run.cfg.seed))?;
    print!("{}", report_text(&r, run.cfg.seed));
    Ok(())
}

/// Parses `Lf=a..b` (inclusive).
pub fn parse_sweep(s: &str, layers: usize) -> Result<std::ops::RangeInclusive<usize>> {
    let body = s.strip_prefix("Lf=").ok_or_else(|| anyhow!("sweep `{s}` must look like Lf=0..12"))?;
    let (a, b) = body.split_once("..").ok_or_else(|| anyhow!("sweep `{s}` must look like Lf=0..12"))?;
    let (a, b): (usize, usize) = (a.parse()?, b.trim_start_matches('=').parse()?);
    if a > b || b > layers {
        bail!("sweep {a}..{b} is outside 0..{layers}");
    }
    Ok(a..=b)
}

fn flops(run: &Run, sweep: Option<&str>) -> Result<()> {
    let m = &run.cfg.model;
    let (nv, na) = (m.tokenizer.n_rgb_tokens(), m.tokenizer.n_spec_tokens());
    match sweep {
        None => {
            let r = count_flops(m, nv, na);
            run.write("flops.csv", r.csv())?;
            println!("{:.3} GFLOPs per sample", r.total_flops() as f64 * 1e-9);
        }
        Some(s) => {
            let range = parse_sweep(s, m.layers)?;
            let all = fusion_sweep(m, nv, na, &[Strategy::Bottleneck, Strategy::VanillaCross]);
            let rows: Vec<_> = all.into_iter().filter(|r| range.contains(&r.fusion_layer)).collect();
            let csv = sweep_csv(&rows);
            run.write("flops.csv", &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn rollout(run: &Run, model: Option<&Path>, data: Option<&Path>, index: usize) -> Result<()> {
    let m = match model {
        Some(p) => load_model(p).context("rollout: loading model")?,
        None => init_params(&run.cfg.model, &mut ChaCha8Rng::seed_from_u64(run.cfg.seed))?,
    };
    let clip = match data {
        Some(d) => {
            let ds = Dataset::load(d)?;
            ds.clips.get(index).cloned().ok_or_else(|| anyhow!("rollout: clip {index} outside {} clips", ds.len()))?
        }
        None => {
            let s = SynthConfig::for_tokenizer(&m.config.tokenizer, m.config.head.widths()[0], run.cfg.data.task);
            let mut r = ChaCha8Rng::seed_from_u64(run.cfg.seed);
            gen_synthetic_av(&s, index + 1, "rollout", &mut r)?.clips.swap_remove(index)
        }
    };
    let tok = Tokenizer::new(m.config.tokenizer.clone())?;
    let inputs: ModelInputs = batch_inputs(&[window_tokens(&m, &tok, &clip, 0.0)?])?;
    let mut g = Graph::new();
    let vars = m.bind_constants(&mut g)?;
    let out = m.forward(&mut g, &vars, &inputs, &mut ForwardOptions { record: true, ..Default::default() })?;
    let t = &m.config.tokenizer;
    for (name, source) in [("rgb", out.layout.rgb.start), ("spec", out.layout.spec.start)] {
        if out.layout.range(if name == "rgb" { Modality::Rgb } else { Modality::Spec }).is_empty() {
            continue;
        }
        let s = attention_rollout(&out.records, &out.layout, m.config.layers, source, 0).context("rollout")?;
        if !out.layout.rgb.is_empty() {
            run.write(&format!("{name}_cls_to_rgb.pgm"), to_pgm(&s.rgb_grid(t)?)?)?;
        }
        if !out.layout.spec.is_empty() {
            run.write(&format!("{name}_cls_to_spec.pgm"), to_pgm(&s.spec_grid(t)?)?)?;
        }
        run.write(&format!("{name}_cls.txt"), s.sidecar())?;
        let curve = rollout_curve(&out.records, &out.layout, m.config.layers, source, 0)?;
        run.write(&format!("{name}_cls_curve.csv"), rollout_curve_csv(&curve))?;
        println!(
            "{name} CLS: rgb {:.4} fsn {:.4} spec {:.4}",
            s.modality_mass(Modality::Rgb),
            s.bottleneck_mass(),
            s.modality_mass(Modality::Spec)
        );
    }
    Ok(())
}

fn reach(run: &Run, probe: bool) -> Result<()> {
    let r = cross_modal_reachability(&run.cfg.model);
    run.write("reach.csv", r.csv())?;
    let mut text = String::new();
    for (i, j, name) in [(0, 2, "rgb -> spec"), (2, 0, "spec -> rgb")] {
        let _ = writeln!(
            text,
            "{name}: end-to-end {}, shortest path {}",
            r.end_to_end[i][j],
            r.shortest_path(i, j).map_or("none".into(), |k| format!("{k} layer(s)"))
        );
    }
    for v in &r.violations {
        let _ = writeln!(text, "violation: {v}");
    }
    if probe {
        let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
        let m = perturbed(&run.cfg.model, &mut rng)?;
        let bad = probe_agrees(&m, &r, &mut rng)?;
        let _ = writeln!(text, "jacobian probe mismatches: {}", bad.len());
        for b in &bad {
            let _ = writeln!(text, "  {b}");
        }
        if !bad.is_empty() {
            run.write("reach.txt", &text)?;
            bail!("reach: graph and Jacobian probe disagree");
        }
    }
    run.write("reach.txt", &text)?;
    print!("{text}");
    if !r.violations.is_empty() {
        bail!("reach: topology violates the isolation guarantees");
    }
    Ok(())
}

/// Fresh parameters plus `N(0, 0.3²)` noise, so no path is trivially zero.
fn perturbed(cfg: &mbt::model::ModelConfig, rng: &mut ChaCha8Rng) -> Result<mbt::model::Mbt> {
    let mut m = init_params(cfg, rng)?;
    for id in m.store.ids().collect::<Vec<_>>() {
        let p = m.store.get_mut(id);
        let noise = Tensor::randn(p.shape(), 0.3, rng);
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    Ok(m)
}

fn gradcheck(run: &Run, eps: f64, tol: f64) -> Result<()> {
    let mut text = format!("seed = {}\n", run.cfg.seed);
    let mut worst: f64 = 0.0;
    for (name, e) in primitive_suite(run.cfg.seed, eps)? {
        worst = worst.max(e);
        let _ = writeln!(text, "primitive {name}: {e:.3e}");
    }
    let cfg = &run.cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let m = perturbed(cfg, &mut rng)?;
    let t = &cfg.tokenizer;
    let b = 2;
    let inputs = ModelInputs {
        rgb: cfg.inputs.uses(Modality::Rgb).then(|| Tensor::randn(&[b, t.n_rgb_tokens(), t.rgb_patch_dim()], 1.0, &mut rng)),
        spec: cfg.inputs.uses(Modality::Spec).then(|| Tensor::randn(&[b, t.n_spec_tokens(), t.spec_patch_dim()], 1.0, &mut rng)),
    };
    let targets = cfg
        .head
        .widths()
        .into_iter()
        .map(|c| one_hot(&[0, c - 1], c))
        .collect::<mbt::Result<Vec<_>>>()?;
    let mut failed = 0;
    for c in m.loss_grad_check(&inputs, &targets, eps)? {
        if !c.shift_invariant {
            worst = worst.max(c.max_rel_error);
        }
        if !c.passes(tol) {
            failed += 1;
        }
        let _ = writeln!(
            text,
            "param {}: {}",
            c.name,
            if c.shift_invariant { format!("|grad| {:.1e} (shift-invariant)", c.max_abs_grad) } else { format!("{:.3e}", c.max_rel_error) }
        );
    }
    let _ = writeln!(text, "max relative error = {worst:.3e}");
    run.write("gradcheck.txt", &text)?;
    println!("max relative error = {worst:.3e}");
    if failed > 0 || worst >= tol {
        bail!("gradcheck: {failed} parameter groups above tolerance {tol:e}");
    }
    Ok(())
}
