use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use lipcycle::ablation::{ablation_csv, delta_csv, m2s_delta, run_ablation};
use lipcycle::audio::{fit_unit_codebook, quantize_units, EncoderMode, MelSpectrogram};
use lipcycle::checkpoint::{load_denoiser, load_m2s, save_denoiser, save_m2s};
use lipcycle::corpus::{generate_corpus, load_corpus, persist_corpus, Corpus, Lineage, Split};
use lipcycle::diffusion::{train_thunder, DenoiserModel};
use lipcycle::face::{decode_sequence, ExpressionSequence};
use lipcycle::m2s::train::{eval_m2s_samples, init_m2s, samples_for};
use lipcycle::m2s::{analysis_by_audio_synthesis, eval_m2s, train_m2s, InputSpace, M2SModel};
use lipcycle::metrics::{
    evaluate_model, format_table, lip_opening, pcc_ccc, sample_seed, DiffusionSampler, MetricReport, Sampler,
};
use lipcycle::{seed, Error};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Command, Common};

#[derive(Debug)]
pub enum Failure {
    /// Bad config or arguments.
    Config(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Run(e) => match e.root() {
                Error::InvalidArgument(_) | Error::NotFound(_) | Error::Lineage(_) => 1,
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
                _ => 2,
            },
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn resolve(common: &Common, adjust: impl FnOnce(&mut RunConfig)) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(|e| Failure::Config(e.0))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.corpus.seed = s;
    }
    adjust(&mut cfg);
    cfg.validate().map_err(|e| Failure::Config(e.0))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    args: Vec<String>,
    artifact_version: &'a str,
    config_sha256: String,
    seed: u64,
    lineage: Option<Lineage>,
    outputs: Vec<String>,
    config: &'a RunConfig,
}

struct Run {
    command: &'static str,
    out: PathBuf,
    cfg: RunConfig,
    lineage: Option<Lineage>,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str, common: &Common, cfg: RunConfig) -> Outcome<Self> {
        fs::create_dir_all(&common.out).map_err(|e| Error::Io {
            path: common.out.clone(),
            source: e,
        })?;
        Ok(Self {
            command,
            out: common.out.clone(),
            cfg,
            lineage: None,
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Outcome<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        self.record(&p);
        Ok(p)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Outcome<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        self.write(name, text)
    }

    fn finish(mut self) -> Outcome<()> {
        let cfg = self.cfg.clone();
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            artifact_version: lipcycle::ARTIFACT_VERSION,
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            lineage: self.lineage.clone(),
            outputs: std::mem::take(&mut self.outputs),
            config: &cfg,
        };
        let name = format!("run_manifest_{}.json", self.command);
        self.write_json(&name, &manifest)?;
        Ok(())
    }
}

fn open_corpus(common: &Common) -> Outcome<Corpus> {
    let dir = common.corpus_dir();
    load_corpus(&dir).map_err(|e| e.context(format!("corpus {} (run gen-corpus first)", dir.display())).into())
}

fn m2s_name(space: InputSpace) -> String {
    format!("m2s_{}.ckpt", space.name())
}

fn open_m2s(path: &Path, corpus: &Corpus) -> Outcome<M2SModel> {
    let m = load_m2s(path).map_err(|e| e.context(format!("m2s checkpoint {}", path.display())))?;
    check_lineage(corpus, m.lineage.as_ref(), "m2s checkpoint")?;
    Ok(m)
}

fn open_denoiser(path: &Path, corpus: &Corpus) -> Outcome<DenoiserModel> {
    let m = load_denoiser(path).map_err(|e| e.context(format!("denoiser checkpoint {}", path.display())))?;
    check_lineage(corpus, m.lineage.as_ref(), "denoiser checkpoint")?;
    Ok(m)
}

fn check_lineage(corpus: &Corpus, lineage: Option<&Lineage>, what: &str) -> Outcome<()> {
    match lineage {
        Some(l) => Ok(corpus.lineage().check(l, what)?),
        None => Err(Error::Lineage(format!("{what} records no corpus lineage")).into()),
    }
}

pub fn run(command: Command) -> Outcome<()> {
    match command {
        Command::GenCorpus { common } => gen_corpus(&common),
        Command::FitUnits { common } => fit_units(&common),
        Command::TrainM2s { common, input_space } => train_m2s_cmd(&common, input_space),
        Command::EvalM2s { common, m2s, split } => eval_m2s_cmd(&common, m2s, split),
        Command::TrainThunder {
            common,
            m2s,
            with_m2s,
            no_m2s,
            m2s_weight,
            freeze_audio,
            train_audio,
        } => {
            let with = if with_m2s {
                Some(true)
            } else if no_m2s {
                Some(false)
            } else {
                None
            };
            let mode = if freeze_audio {
                Some(EncoderMode::Frozen)
            } else if train_audio {
                Some(EncoderMode::Trainable)
            } else {
                None
            };
            train_thunder_cmd(&common, m2s, with, m2s_weight, mode)
        }
        Command::Sample {
            common,
            model,
            audio,
            num_samples,
        } => sample_cmd(&common, model, audio, num_samples),
        Command::Evaluate { common, model } => evaluate_cmd(&common, model),
        Command::Ablate { common, m2s_dir } => ablate_cmd(&common, m2s_dir),
        Command::Abas { common, m2s } => abas_cmd(&common, m2s),
    }
}

fn gen_corpus(common: &Common) -> Outcome<()> {
    let cfg = resolve(common, |_| {})?;
    let mut run = Run::new("gen-corpus", common, cfg)?;
    let corpus = generate_corpus(&run.cfg.corpus)?;
    let dir = common.corpus_dir();
    persist_corpus(&corpus, &dir)?;
    run.record(&dir);
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| corpus.indices(s).len());
    println!(
        "corpus {} written to {}: {}/{}/{} train/val/test sequences",
        &corpus.manifest.corpus_id[..12],
        dir.display(),
        counts[0],
        counts[1],
        counts[2]
    );
    run.lineage = Some(corpus.lineage());
    run.finish()
}

#[derive(Serialize)]
struct UnitsReport {
    n_units: usize,
    frames: usize,
    /// Fraction of frames whose refitted unit maps, by majority vote, to the corpus unit.
    purity: f64,
}

fn fit_units(common: &Common) -> Outcome<()> {
    let cfg = resolve(common, |_| {})?;
    let mut run = Run::new("fit-units", common, cfg)?;
    let corpus = open_corpus(common)?;
    let mels: Vec<&MelSpectrogram> = corpus.split(Split::Train).into_iter().map(|r| &r.mel).collect();
    let k = run.cfg.corpus.n_units;
    let codebook = fit_unit_codebook(&mels, k, seed::stream_seed(run.cfg.seed, "codebook"))?;
    let kc = corpus.codebook.num_units();
    let mut counts = vec![vec![0usize; kc]; k];
    let mut frames = 0;
    for r in corpus.split(Split::Train) {
        for (a, b) in quantize_units(&r.mel, &codebook)?.ids.iter().zip(&r.units.ids) {
            counts[*a][*b] += 1;
            frames += 1;
        }
    }
    let agree: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    let report = UnitsReport {
        n_units: k,
        frames,
        purity: agree as f64 / frames as f64,
    };
    println!("{k} units over {frames} training frames, purity {:.4} against the corpus units", report.purity);
    run.write_json("units_codebook.json", &codebook)?;
    run.write_json("units_report.json", &report)?;
    run.lineage = Some(corpus.lineage());
    run.finish()
}

fn train_m2s_cmd(common: &Common, space: Option<InputSpace>) -> Outcome<()> {
    let cfg = resolve(common, |c| {
        if let Some(s) = space {
            c.m2s.input_space = s;
        }
    })?;
    let mut run = Run::new("train-m2s", common, cfg)?;
    let corpus = open_corpus(common)?;
    let space = run.cfg.m2s.input_space;
    let mcfg = run.cfg.m2s_config(&corpus.template, space);
    let (model, hist) = train_m2s(&corpus, &mcfg, &run.cfg.m2s_train())?;
    let path = run.path(&m2s_name(space));
    save_m2s(&model, &path)?;
    run.record(&path);
    run.write_json("m2s_history.json", &hist)?;
    let val = eval_m2s(&model, &corpus, Split::Val)?;
    println!(
        "m2s ({}) trained for {} steps, best epoch {:?}; val unit accuracy {:.4}, mel L1 {:.4}",
        space.name(),
        hist.steps,
        hist.best_epoch,
        val.unit_accuracy,
        val.mel_l1
    );
    run.lineage = Some(corpus.lineage());
    run.finish()
}

#[derive(Serialize)]
struct M2SReport {
    split: Split,
    input_space: InputSpace,
    unit_accuracy: f64,
    mel_l1: f64,
    untrained_mel_l1: f64,
    frames: usize,
}

fn eval_m2s_cmd(common: &Common, m2s: Option<PathBuf>, split: Split) -> Outcome<()> {
    let cfg = resolve(common, |_| {})?;
    let mut run = Run::new("eval-m2s", common, cfg)?;
    let corpus = open_corpus(common)?;
    let path = m2s.unwrap_or_else(|| run.path(&m2s_name(run.cfg.m2s.input_space)));
    let model = open_m2s(&path, &corpus)?;
    let trained = eval_m2s(&model, &corpus, split)?;
    let train = samples_for(&corpus, Split::Train, &model.config)?;
    let untrained = init_m2s(&model.config, &train, run.cfg.seed)?;
    let base = eval_m2s_samples(&untrained, &samples_for(&corpus, split, &model.config)?)?;
    let report = M2SReport {
        split,
        input_space: model.config.input_space,
        unit_accuracy: trained.unit_accuracy,
        mel_l1: trained.mel_l1,
        untrained_mel_l1: base.mel_l1,
        frames: trained.frames,
    };
    println!(
        "{} split: unit accuracy {:.4}, mel L1 {:.4} (untrained {:.4}, ratio {:.3})",
        split.name(),
        report.unit_accuracy,
        report.mel_l1,
        report.untrained_mel_l1,
        report.mel_l1 / report.untrained_mel_l1
    );
    run.write_json("m2s_eval.json", &report)?;
    run.lineage = Some(corpus.lineage());
    run.finish()
}

fn train_thunder_cmd(
    common: &Common,
    m2s: Option<PathBuf>,
    with_m2s: Option<bool>,
    weight: Option<f64>,
    mode: Option<EncoderMode>,
) -> Outcome<()> {
    let cfg = resolve(common, |c| {
        if let Some(w) = with_m2s {
            c.diffusion.with_m2s = w;
        }
        if let Some(w) = weight {
            c.diffusion.w_m2s = w;
        }
        if let Some(m) = mode {
            c.diffusion.encoder_mode = m;
        }
    })?;
    let mut run = Run::new("train-thunder", common, cfg)?;
    let corpus = open_corpus(common)?;
    let m2s_model = if run.cfg.diffusion.with_m2s {
        let path = m2s.unwrap_or_else(|| run.path(&m2s_name(run.cfg.m2s.input_space)));
        if !path.exists() {
            return Err(Error::NotFound(format!(
                "m2s checkpoint {} is required with --with-m2s (train it with train-m2s or pass --no-m2s)",
                path.display()
            ))
            .into());
        }
        Some(open_m2s(&path, &corpus)?)
    } else {
        None
    };
    let (model, hist) = train_thunder(&corpus, m2s_model.as_ref(), &run.cfg.denoiser(), &run.cfg.thunder_train())?;
    let path = run.path("thunder.ckpt");
    save_denoiser(&model, &path)?;
    run.record(&path);
    run.write_json("thunder_history.json", &hist)?;
    let tail = hist.total.len().clamp(1, 10);
    let last = hist.total.iter().rev().take(tail).sum::<f64>() / tail as f64;
    println!(
        "denoiser trained for {} steps (with_m2s = {}), mean loss over the last {tail} steps {last:.5}",
        hist.steps, run.cfg.diffusion.with_m2s
    );
    run.lineage = Some(corpus.lineage());
    run.finish()
}

fn expressions_csv(x: &ExpressionSequence) -> String {
    let cols = x.frames.ncols();
    let mut header: Vec<String> = (0..cols - 3).map(|i| format!("psi_{i}")).collect();
    header.extend(["jaw_x", "jaw_y", "jaw_z"].map(String::from));
    let mut out = header.join(",") + "\n";
    for row in x.frames.rows() {
        out.push_str(&row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

fn sample_cmd(common: &Common, model: Option<PathBuf>, audio: usize, num_samples: usize) -> Outcome<()> {
    if num_samples == 0 {
        return Err(Failure::Config("--num-samples must be positive".into()));
    }
    let cfg = resolve(common, |_| {})?;
    let mut run = Run::new("sample", common, cfg)?;
    let corpus = open_corpus(common)?;
    let path = model.unwrap_or_else(|| run.path("thunder.ckpt"));
    let model = open_denoiser(&path, &corpus)?;
    let rec = corpus
        .records
        .get(audio)
        .ok_or_else(|| Error::NotFound(format!("sequence {audio} (corpus has {})", corpus.records.len())))?;
    let sampler = DiffusionSampler::new(&model, run.cfg.diffusion.guidance)?;
    let gt = lip_opening(&decode_sequence(&corpus.template, &rec.expressions)?, &corpus.template);
    fs::create_dir_all(run.path("samples")).map_err(|e| Error::Io {
        path: run.path("samples"),
        source: e,
    })?;
    for s in 0..num_samples {
        let x = sampler.sample(rec, sample_seed(run.cfg.seed, audio, s))?;
        let lips = lip_opening(&decode_sequence(&corpus.template, &x)?, &corpus.template);
        let (pcc, _) = pcc_ccc(&lips, &gt);
        run.write(&format!("samples/seq_{audio:05}_{s:03}.csv"), expressions_csv(&x))?;
        println!("sample {s}: {} frames, lip-opening PCC against ground truth {pcc:.4}", x.len());
    }
    run.lineage = Some(corpus.lineage());
    run.finish()
}

fn report_csv(report: &MetricReport) -> String {
    format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row())
}

fn evaluate_cmd(common: &Common, model: Option<PathBuf>) -> Outcome<()> {
    let cfg = resolve(common, |_| {})?;
    let mut run = Run::new("evaluate", common, cfg)?;
    let corpus = open_corpus(common)?;
    let path = model.unwrap_or_else(|| run.path("thunder.ckpt"));
    let model = open_denoiser(&path, &corpus)?;
    let sampler = DiffusionSampler::new(&model, run.cfg.diffusion.guidance)?;
    let report = evaluate_model(&sampler, &corpus, Split::Test, &run.cfg.eval_options())?;
    run.write("report.csv", report_csv(&report))?;
    let table = format_table(&[(path.display().to_string(), report)]);
    run.write("report.txt", &table)?;
    print!("{table}");
    run.lineage = Some(corpus.lineage());
    run.finish()
}

fn ablate_cmd(common: &Common, m2s_dir: Option<PathBuf>) -> Outcome<()> {
    let cfg = resolve(common, |_| {})?;
    let mut run = Run::new("ablate", common, cfg)?;
    let corpus = open_corpus(common)?;
    let dir = m2s_dir.unwrap_or_else(|| run.out.clone());
    let mut models: Vec<M2SModel> = Vec::new();
    for v in run.cfg.ablation.variants.iter().filter(|v| v.with_m2s) {
        if models.iter().any(|m| m.config.input_space == v.input_space) {
            continue;
        }
        let path = dir.join(m2s_name(v.input_space));
        if !path.exists() {
            return Err(Error::NotFound(format!(
                "variant `{}` needs the m2s checkpoint {}",
                v.name,
                path.display()
            ))
            .into());
        }
        models.push(open_m2s(&path, &corpus).map_err(|f| match f {
            Failure::Run(e) => Failure::Run(e.context(format!("variant `{}`", v.name))),
            other => other,
        })?);
    }
    let rows = run_ablation(
        &corpus,
        &run.cfg.ablation,
        &models,
        &run.cfg.denoiser(),
        &run.cfg.thunder_train(),
        &run.cfg.eval_options(),
        run.cfg.diffusion.guidance,
    )?;
    run.write("ablation.csv", ablation_csv(&rows))?;
    let labelled: Vec<(String, MetricReport)> = rows.iter().map(|r| (r.variant.name.clone(), r.report)).collect();
    let mut table = format_table(&labelled);
    if let Some(d) = m2s_delta(&rows) {
        run.write("ablation_delta.csv", delta_csv(&d))?;
        table.push_str(&format_table(&[("with - without".into(), d)]));
    }
    run.write("ablation.txt", &table)?;
    print!("{table}");
    run.lineage = Some(corpus.lineage());
    run.finish()
}

fn abas_cmd(common: &Common, m2s: Option<PathBuf>) -> Outcome<()> {
    let cfg = resolve(common, |_| {})?;
    let mut run = Run::new("abas", common, cfg)?;
    let corpus = open_corpus(common)?;
    let path = m2s.unwrap_or_else(|| run.path(&m2s_name(run.cfg.m2s.input_space)));
    let model = open_m2s(&path, &corpus)?;
    let template = Rc::new(corpus.template.clone());
    let opts = run.cfg.abas_options();
    let mut csv = String::from("sequence,initial_objective,best_objective,reduction,lip_pcc\n");
    for idx in corpus.indices(Split::Test).into_iter().take(run.cfg.abas.targets) {
        let rec = &corpus.records[idx];
        let spk = corpus.speaker_embedding(rec.speaker_id)?;
        let res = analysis_by_audio_synthesis(
            &model,
            &template,
            &rec.mel.frames,
            &rec.units.ids,
            &spk,
            rec.frames(),
            &opts,
        )
        .map_err(|e| e.context(format!("test sequence {idx}")))?;
        let lips = lip_opening(&decode_sequence(&template, &res.expressions)?, &template);
        let gt = lip_opening(&decode_sequence(&template, &rec.expressions)?, &template);
        let (pcc, _) = pcc_ccc(&lips, &gt);
        let reduction = 1.0 - res.best_objective / res.initial_objective;
        println!(
            "sequence {idx}: objective {:.4} -> {:.4} ({:.1}% lower), lip-opening PCC {pcc:.4}",
            res.initial_objective,
            res.best_objective,
            100.0 * reduction
        );
        csv.push_str(&format!(
            "{idx},{},{},{reduction},{pcc}\n",
            res.initial_objective, res.best_objective
        ));
    }
    run.write("abas.csv", csv)?;
    run.lineage = Some(corpus.lineage());
    run.finish()
}
