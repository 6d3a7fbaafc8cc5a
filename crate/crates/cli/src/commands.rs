use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use embgate_core::checkpoint;
use embgate_core::data::{load_tsv, Encoded, Featurizer};
use embgate_core::embeddings::{EmbeddingStore, OovPolicy, PairLexicon};
use embgate_core::experiment::run_seed;
use embgate_core::metrics::{evaluate, export_gate_snapshot, histogram_csv, seed_average, EvalReport};
use embgate_core::model::{count_injection_params, InjectionMode, Model};
use embgate_core::synth::{self, SynthSpec};
use embgate_core::tokenize::{build_injection_sequence, pack_pair, wordpiece_tokenize, Alignment, WordPieceVocab};
use embgate_core::train::TrainConfig;

use crate::config::RunConfig;
use crate::UsageError;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).map_err(|e| embgate_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| {
        embgate_core::Error::Io {
            path: p.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn load_embeddings(path: &Path, oov: &str) -> Result<EmbeddingStore> {
    let policy: OovPolicy = oov.parse()?;
    Ok(EmbeddingStore::load(path)?.with_oov_policy(policy))
}

pub struct TrainOverrides {
    pub mode: Option<InjectionMode>,
    pub layer: Option<usize>,
    pub seed: Option<u64>,
    pub embeddings: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub freeze_gate: bool,
}

impl TrainOverrides {
    fn apply(self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.model.injection_mode = m.to_string();
            if m == InjectionMode::None {
                cfg.data.embeddings = None;
            }
        }
        if let Some(l) = self.layer {
            cfg.model.injection_layer = l;
        }
        if let Some(s) = self.seed {
            cfg.train.seeds = vec![s];
        }
        if let Some(e) = self.embeddings {
            cfg.data.embeddings = Some(e);
        }
        if let Some(l) = self.lexicon {
            cfg.data.lexicon = Some(l);
        }
        if let Some(o) = self.out {
            cfg.output.dir = o;
        }
        cfg.train.freeze_gate |= self.freeze_gate;
    }
}

fn per_seed_line(seed: u64, r: &EvalReport, best_step: usize, steps: usize, stopped_early: bool) -> String {
    format!(
        "seed.{seed}=f1 {:.6} accuracy {:.6} failed_run {} best_step {best_step} steps {steps} stopped_early {stopped_early}\n",
        r.f1, r.accuracy, r.failed_run
    )
}

pub fn train(config: &Path, overrides: TrainOverrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    for f in cfg.input_files() {
        if !f.is_file() {
            return Err(embgate_core::Error::Data(format!("missing input file {}", f.display())).into());
        }
    }
    let mode = cfg.mode()?;

    let vocab = WordPieceVocab::load(&cfg.data.vocab)?;
    let store = match (&cfg.data.embeddings, mode.uses_injection()) {
        (Some(p), true) => Some(load_embeddings(p, &cfg.data.oov)?),
        _ => None,
    };
    let lexicon = cfg.data.lexicon.as_deref().map(PairLexicon::load).transpose()?;
    let model_cfg = cfg.model_config(vocab.len(), store.as_ref().map_or(0, EmbeddingStore::dim))?;
    model_cfg.validate()?;

    let featurizer = Featurizer {
        vocab: &vocab,
        embeddings: store.as_ref(),
        max_seq_len: model_cfg.max_seq_len,
    };
    let train_set = featurizer.encode_all(&load_tsv(&cfg.data.train)?)?;
    let dev = featurizer.encode_all(&load_tsv(&cfg.data.dev)?)?;
    let test = match &cfg.data.test {
        Some(p) => Some(featurizer.encode_all(&load_tsv(p)?)?),
        None => None,
    };
    log::info!(
        "mode {mode}, {} train / {} dev pairs, seeds {:?}",
        train_set.len(),
        dev.len(),
        cfg.train.seeds
    );

    let mut meta = BTreeMap::new();
    meta.insert("vocab".to_string(), "vocab.txt".to_string());
    meta.insert("oov".to_string(), cfg.data.oov.clone());
    if let (Some(p), true) = (&cfg.data.embeddings, mode.uses_injection()) {
        meta.insert("embeddings".to_string(), absolute(p)?.display().to_string());
    }
    if let Some(p) = &cfg.data.lexicon {
        meta.insert("lexicon".to_string(), absolute(p)?.display().to_string());
    }
    let vocab_text = fs::read_to_string(&cfg.data.vocab).with_context(|| cfg.data.vocab.display().to_string())?;

    let out = &cfg.output.dir;
    let base = cfg.train.train_config();
    let mut dev_reports = Vec::new();
    let mut test_reports = Vec::new();
    let mut lines = String::new();
    for &seed in &cfg.train.seeds {
        let tc = TrainConfig { seed, ..base.clone() };
        let run = run_seed(&model_cfg, &tc, &train_set, &dev, lexicon.as_ref())?;
        let dir = out.join(format!("seed-{seed}"));
        let ckpt = dir.join("checkpoint");
        meta.insert("seed".to_string(), seed.to_string());
        checkpoint::save(&ckpt, &run.model, &meta)?;
        write(&ckpt.join("vocab.txt"), &vocab_text)?;
        write(&dir.join("history.csv"), &run.outcome.history_csv())?;
        write(&dir.join("dev_report.txt"), &run.dev_report.to_text())?;
        if let Some(test) = &test {
            let r = evaluate(&run.model, test, lexicon.as_ref())?;
            write(&dir.join("test_report.txt"), &r.to_text())?;
            test_reports.push(r);
        }
        if run.dev_report.failed_run {
            log::warn!("seed {seed}: failed run, only the majority class is predicted");
        }
        lines.push_str(&per_seed_line(
            seed,
            &run.dev_report,
            run.outcome.best_step,
            run.outcome.steps,
            run.outcome.stopped_early,
        ));
        dev_reports.push(run.dev_report);
    }

    let mut report = format!("mode={mode}\ninjection_layer={}\n", model_cfg.injection_layer);
    report.push_str(&lines);
    for line in seed_average(&dev_reports)?.to_text().lines() {
        let _ = writeln!(report, "dev.{line}");
    }
    if !test_reports.is_empty() {
        for line in seed_average(&test_reports)?.to_text().lines() {
            let _ = writeln!(report, "test.{line}");
        }
    }
    write(&out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn ckpt_path(ckpt: &Path, meta: &BTreeMap<String, String>, key: &str) -> Option<PathBuf> {
    meta.get(key).map(|p| ckpt.join(p))
}

pub fn eval(
    ckpt_dir: &Path,
    data: &Path,
    lexicon: Option<&Path>,
    embeddings: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_dir)?;
    let model = &ckpt.model;
    let vocab_path =
        ckpt_path(ckpt_dir, &ckpt.meta, "vocab").ok_or_else(|| UsageError("checkpoint names no vocabulary".into()))?;
    let vocab = WordPieceVocab::load(&vocab_path)?;
    if vocab.len() != model.config.vocab_size {
        return Err(embgate_core::Error::Checkpoint(format!(
            "vocabulary has {} pieces, the model expects {}",
            vocab.len(),
            model.config.vocab_size
        ))
        .into());
    }
    let store = if model.config.injection_mode.uses_injection() {
        let path = embeddings
            .map(Path::to_path_buf)
            .or_else(|| ckpt_path(ckpt_dir, &ckpt.meta, "embeddings"))
            .ok_or_else(|| UsageError("model uses injection; pass --embeddings".into()))?;
        let oov = ckpt.meta.get("oov").map_or("zero", String::as_str);
        let s = load_embeddings(&path, oov)?;
        if s.dim() != model.config.ext_dim {
            return Err(embgate_core::Error::Data(format!(
                "{} has dimension {}, the model expects {}",
                path.display(),
                s.dim(),
                model.config.ext_dim
            ))
            .into());
        }
        Some(s)
    } else {
        None
    };
    let lexicon = match lexicon {
        Some(p) => Some(PairLexicon::load(p)?),
        None => ckpt_path(ckpt_dir, &ckpt.meta, "lexicon")
            .map(PairLexicon::load)
            .transpose()?,
    };
    let encoded: Vec<Encoded> = Featurizer {
        vocab: &vocab,
        embeddings: store.as_ref(),
        max_seq_len: model.config.max_seq_len,
    }
    .encode_all(&load_tsv(data)?)?;
    let report = evaluate(model, &encoded, lexicon.as_ref())?.to_text();
    print!("{report}");
    if let Some(out) = out {
        write(out, &report)?;
    }
    Ok(())
}

pub fn paramcount(hidden: usize, ext_dim: usize) -> Result<()> {
    let gated = count_injection_params(InjectionMode::Gated, hidden, ext_dim)?;
    let ungated = count_injection_params(InjectionMode::Ungated, hidden, ext_dim)?;
    let attention = count_injection_params(InjectionMode::Attention, hidden, ext_dim)?;
    println!("hidden={hidden} ext_dim={ext_dim}");
    println!("gated      {gated:>12}");
    println!("ungated    {ungated:>12}");
    println!("attention  {attention:>12}");
    println!("gated/attention {:.2}%", 100.0 * gated as f64 / attention as f64);
    Ok(())
}

pub fn synth(spec: &SynthSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let data = synth::generate(spec)?;
    data.write(out)?;
    let cfg = RunConfig::for_synth(spec.ext_dim, (0..5).collect());
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    println!(
        "wrote {} train / {} dev / {} test pairs, {} pieces, {} lexicon pairs to {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        data.vocab.len(),
        data.lexicon.len(),
        out.display()
    );
    Ok(())
}

pub fn gates(ckpt_dir: &Path, bins: usize, threshold: f64, out: Option<&Path>) -> Result<()> {
    let model: Model = checkpoint::load(ckpt_dir)?.model;
    let snap = export_gate_snapshot(&model, bins, threshold)?;
    let out = out.map_or_else(|| ckpt_dir.join("gates.csv"), Path::to_path_buf);
    write(&out, &histogram_csv(&snap.histogram))?;
    print!("{}", snap.summary());
    Ok(())
}

fn fmt_row(row: &[f64]) -> String {
    if row.iter().all(|&x| x == 0.0) {
        return "zero".into();
    }
    const SHOWN: usize = 4;
    let mut s: Vec<String> = row.iter().take(SHOWN).map(|x| format!("{x:.4}")).collect();
    if row.len() > SHOWN {
        s.push(format!("... (+{})", row.len() - SHOWN));
    }
    format!("[{}]", s.join(", "))
}

pub fn align_debug(vocab: &Path, embeddings: Option<&Path>, first: &str, second: &str, max_len: usize) -> Result<()> {
    let vocab = WordPieceVocab::load(vocab)?;
    let store = embeddings.map(|p| load_embeddings(p, "zero")).transpose()?;
    let a = wordpiece_tokenize(first, &vocab);
    let b = wordpiece_tokenize(second, &vocab);
    let seq = pack_pair(&a, &b, max_len, &vocab)?.trimmed();
    let inj = store
        .as_ref()
        .map(|s| build_injection_sequence(&seq, &a.tokens, &b.tokens, s))
        .transpose()?;
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:>3}  {:<14} {:>3}  {:<18} injection",
        "pos", "piece", "seg", "source"
    );
    for j in 0..seq.len() {
        let source = match seq.alignment[j] {
            Alignment::Special => "-".to_string(),
            Alignment::Source { sentence, token } => {
                let tokens = if sentence == 1 { &a.tokens } else { &b.tokens };
                format!("s{sentence}:{token} {}", tokens[token])
            }
        };
        let row = inj
            .as_ref()
            .map_or_else(|| "-".to_string(), |m| fmt_row(m.matrix.row(j)));
        let _ = writeln!(
            t,
            "{j:>3}  {:<14} {:>3}  {:<18} {row}",
            vocab.piece(seq.piece_ids[j]),
            seq.segment_ids[j],
            source
        );
    }
    print!("{t}");
    Ok(())
}
