use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use icl_core::data::{generate_synthetic, write_jsonl, write_labels, Mode, Vocabulary, WindowedUser};
use icl_core::eval::{
    ablation_table, config_digest, evaluate, infer_representations, records_to_jsonl, run_ablation, Window,
};
use icl_core::model::{run_grad_suite, Variant};
use icl_core::tensor::cosine;
use icl_core::train::{split_users, train as train_model, Checkpoint};
use icl_core::{Error, Result};

use crate::config::{load_data, RunConfig};
use crate::Common;

const CHECKPOINT: &str = "checkpoint.bin";
const VOCAB: &str = "vocab.txt";

struct Setup {
    cfg: RunConfig,
    out: PathBuf,
}

fn setup(common: &Common) -> Result<Setup> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(Setup { cfg, out })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_vocab(dir: &Path) -> Result<Vocabulary> {
    let path = dir.join(VOCAB);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Vocabulary::from_text(&text)
}

pub fn synth(common: &Common) -> Result<ExitCode> {
    let s = setup(common)?;
    let ds = generate_synthetic(&s.cfg.synthetic)?;
    write_jsonl(&s.out.join("dataset.jsonl"), &ds.logs)?;
    write_labels(&s.out.join("labels.tsv"), &ds.labels)?;
    let b = s.cfg.synthetic.bounds();
    println!(
        "wrote {} users to {}; window bounds history {}..={}, short {}..={}, long {}..={}",
        ds.logs.len(),
        s.out.display(),
        b.history.start,
        b.history.end,
        b.short.start,
        b.short.end,
        b.long.start,
        b.long.end
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(common: &Common, mode: Option<Mode>, variant: Option<Variant>) -> Result<ExitCode> {
    let mut s = setup(common)?;
    if let Some(m) = mode {
        s.cfg.train.mode = m;
    }
    if let Some(v) = variant {
        s.cfg.train.variant = v;
    }
    let data = load_data(&s.cfg, None)?;
    let outcome = train_model(&data.users, &s.cfg.train, data.vocab.len())?;
    let mut ckpt = outcome.checkpoint;
    ckpt.header.extra = s.cfg.to_canonical_json()?;
    ckpt.save(s.out.join(CHECKPOINT))?;
    write(&s.out.join(VOCAB), &data.vocab.to_text())?;
    write(&s.out.join("history.json"), &serde_json::to_string_pretty(&outcome.history)?)?;
    println!(
        "trained {} ({} mode): best epoch {} of {}, validation loss {:.6}",
        s.cfg.train.variant,
        s.cfg.train.mode,
        outcome.history.best_epoch,
        outcome.history.epochs.len(),
        ckpt.header.validation_loss
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(common: &Common, mode: Option<Mode>) -> Result<ExitCode> {
    let s = setup(common)?;
    let ckpt = Checkpoint::load(s.out.join(CHECKPOINT))?;
    let train_cfg = &ckpt.header.train;
    if let Some(m) = mode {
        if m != train_cfg.mode {
            return Err(Error::Config(format!("checkpoint was trained in {} mode, not {m}", train_cfg.mode)));
        }
    }
    let vocab = read_vocab(&s.out)?;
    let expected = train_cfg.model_config(vocab.len());
    ckpt.check_compatible(&expected)?;
    let model = ckpt.model()?;
    let data = load_data(&s.cfg, Some(vocab))?;
    let (_, held_out) = split_users(&data.users, train_cfg.mode, train_cfg.validation_fraction);
    let retrieval_users = if held_out.len() >= s.cfg.eval.retrieval_batch {
        held_out
    } else {
        log::warn!("too few held-out users for a retrieval batch, using every user");
        data.users.iter().collect()
    };
    let e = evaluate(&model, &data.users, &retrieval_users, data.labels.as_ref(), train_cfg.mode, &s.cfg.eval)?;
    let all: Vec<&WindowedUser> = data.users.iter().collect();
    let store = infer_representations(&model, &all, Window::History, s.cfg.eval.probe_space)?;
    store.write_tsv(&s.out.join("embeddings.tsv"))?;
    let digest = config_digest(&(&ckpt.header, &s.cfg.eval))?;
    let records = e.records(train_cfg.variant, train_cfg.mode, train_cfg.seed, &digest);
    let text = records_to_jsonl(&records)?;
    write(&s.out.join("metrics.jsonl"), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(common: &Common, mode: Option<Mode>, variant: Option<Variant>) -> Result<ExitCode> {
    let mut s = setup(common)?;
    if let Some(m) = mode {
        s.cfg.train.mode = m;
    }
    let data = load_data(&s.cfg, None)?;
    let variants: Vec<Variant> = variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for v in variants {
        log::info!("ablation: training {v}");
        let row = run_ablation(&data.users, data.labels.as_ref(), data.vocab.len(), &s.cfg.train, &s.cfg.eval, v)?;
        let digest = config_digest(&(&row.outcome.checkpoint.header.train, &s.cfg.eval))?;
        records.extend(row.evaluation.records(v, row.mode, s.cfg.seed, &digest));
        rows.push(row);
    }
    let table = ablation_table(&rows);
    write(&s.out.join("ablation.txt"), &table)?;
    write(&s.out.join("metrics.jsonl"), &records_to_jsonl(&records)?)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

pub fn inspect(common: &Common, neighbors: usize) -> Result<ExitCode> {
    let s = setup(common)?;
    let ckpt = Checkpoint::load(s.out.join(CHECKPOINT))?;
    let vocab = read_vocab(&s.out)?;
    ckpt.check_compatible(&ckpt.header.train.model_config(vocab.len()))?;
    let model = ckpt.model()?;
    let Some(dict) = model.dictionary() else {
        println!("variant {} has no interest dictionary", model.config.variant);
        return Ok(ExitCode::SUCCESS);
    };
    let data = load_data(&s.cfg, Some(vocab.clone()))?;
    let all: Vec<&WindowedUser> = data.users.iter().collect();
    let u = icl_core::eval::dictionary_utilization(&model, &all, Window::History)?;
    println!("users {}  dispersion {:.4}", u.users, u.dispersion);
    let table = model.embedding();
    for (row, count) in u.counts.iter().enumerate() {
        let c = dict.row_slice(row);
        let mut scored: Vec<(f64, usize)> =
            (0..table.rows()).map(|t| (cosine(c, table.row_slice(t)), t)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let near: Vec<String> = scored
            .iter()
            .take(neighbors)
            .map(|(sim, t)| format!("{}:{sim:.3}", vocab.token(*t as u32).unwrap_or("?")))
            .collect();
        println!("interest {row:>3}  selected {count:>6}  {}", near.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(common: &Common) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let report = run_grad_suite(&cfg.gradcheck)?;
    let variants: HashSet<Variant> = report.cases.iter().map(|c| c.variant).collect();
    for c in &report.cases {
        println!(
            "case {:>3} {:<5} {:<13} D={} M={} K={} B={} gamma={:.2}  max_rel_error={:.3e}",
            c.case,
            c.mode.to_string(),
            c.variant.name(),
            c.dim,
            c.dict_size,
            c.top_k,
            c.batch,
            c.gamma,
            c.max_rel_error
        );
    }
    println!(
        "{} checks over {} variants, max relative error {:.3e} (tolerance {:.1e})",
        report.cases.len(),
        variants.len(),
        report.max_rel_error,
        report.tolerance
    );
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numeric {
            node: "gradcheck".into(),
            message: format!(
                "max relative error {:.3e} exceeds {:.1e}",
                report.max_rel_error, report.tolerance
            ),
        })
    }
}
