use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use xmodal_core::datasetio::{gen_synthetic, read_tensor, Dataset, SynthConfig};
use xmodal_core::embedheads::{embed_query, Embedding};
use xmodal_core::experiment::{test_queries, train_model, ExperimentConfig};
use xmodal_core::pairgen::split_dataset;
use xmodal_core::retrieval::{build_index, evaluate, rank_multi, same_class, ImageIndex};
use xmodal_core::trainer::{load_checkpoint, save_checkpoint};
use xmodal_core::{Error, Result};

use crate::{Cli, Command, EvalArgs, GenSynthArgs, IndexArgs, QueryArgs, SplitArg, TrainArgs};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.xmc";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const INDEX_FILE: &str = "index.xmc";
pub const EVAL_FILE: &str = "eval.json";

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Context { seed: cli.seed, config: cli.config, out: cli.out };
    match cli.command {
        Command::GenSynth(a) => gen_synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Index(a) => index(&ctx, a),
        Command::Query(a) => query(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
    }
}

struct Context {
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Context {
    fn load_config<T: DeserializeOwned + Default>(&self) -> Result<T> {
        let Some(path) = &self.config else { return Ok(T::default()) };
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.clone(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = self.out.as_deref().ok_or_else(|| Error::Argument("--out is required".into()))?;
        fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
        Ok(dir)
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|source| Error::Io { path, source })
}

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

fn threads() -> Result<usize> {
    match std::env::var("XMODAL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Argument(format!("XMODAL_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

fn gen_synth(ctx: &Context, a: GenSynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = ctx.load_config()?;
    set(&mut cfg.seed, ctx.seed);
    set(&mut cfg.num_classes, a.classes);
    set(&mut cfg.images_per_class, a.images_per_class);
    set(&mut cfg.object_cells, a.object_cells);
    set(&mut cfg.grid_h, a.grid_h);
    set(&mut cfg.grid_w, a.grid_w);
    set(&mut cfg.channels, a.channels);
    set(&mut cfg.noise_image, a.noise_image);
    set(&mut cfg.noise_text, a.noise_text);
    set(&mut cfg.noise_sketch, a.noise_sketch);
    set(&mut cfg.text_dim, a.text_dim);
    set(&mut cfg.sketch_dim, a.sketch_dim);
    set(&mut cfg.projection_std, a.projection_std);
    set(&mut cfg.sketches_per_image, a.sketches_per_image);
    cfg.multi |= a.multi;
    cfg.validate()?;
    let dir = ctx.out_dir()?;
    gen_synthetic(&cfg, dir)?;
    write_json(dir.join(CONFIG_FILE), &cfg)?;
    println!("{}", dir.join("manifest.json").display());
    Ok(())
}

fn experiment_config(ctx: &Context) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = ctx.load_config()?;
    set(&mut cfg.seed, ctx.seed);
    cfg.train.threads = threads()?;
    Ok(cfg)
}

fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let mut cfg = experiment_config(ctx)?;
    set(&mut cfg.modality, a.modality.map(Into::into));
    cfg.multi |= a.multi;
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.train.batch_size, a.batch_size);
    set(&mut cfg.train.margin, a.margin);
    set(&mut cfg.train.n_max, a.n_max);
    set(&mut cfg.pairgen.n_m, a.n_m);
    set(&mut cfg.pairgen.train_fraction, a.train_fraction);
    set(&mut cfg.model.hidden, a.hidden);
    set(&mut cfg.model.attn, a.attn);
    set(&mut cfg.model.query_hidden, a.query_hidden);
    set(&mut cfg.model.embed, a.embed);

    let dataset = Dataset::load(&a.manifest)?;
    let cfg = cfg.resolve(&dataset)?;
    let dir = ctx.out_dir()?;
    write_json(dir.join(CONFIG_FILE), &cfg)?;
    let (train_items, _) = split_dataset(&dataset.manifest.items, &cfg.pairgen)?;
    let (checkpoint, pairs) = train_model(&dataset, &train_items, &cfg)?;
    log::info!("trained on {pairs} pairs");
    save_checkpoint(&checkpoint, dir.join(CHECKPOINT_FILE))?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (e, l) in checkpoint.loss_history.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", e + 1));
    }
    write(dir.join(LOSS_CURVE_FILE), csv)?;
    println!("{}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn index(ctx: &Context, a: IndexArgs) -> Result<()> {
    let mut cfg = experiment_config(ctx)?;
    set(&mut cfg.pairgen.train_fraction, a.train_fraction);
    cfg.pairgen.seed = cfg.seed;
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let n_max = a.n_max.unwrap_or(checkpoint.config.n_max);
    let dataset = Dataset::load(&a.manifest)?;
    let items = match a.split {
        SplitArg::All => dataset.manifest.items.clone(),
        SplitArg::Test => split_dataset(&dataset.manifest.items, &cfg.pairgen)?.1,
    };
    let index = build_index(&items, &dataset, &checkpoint.params, n_max)?;
    let dir = ctx.out_dir()?;
    index.save(dir.join(INDEX_FILE))?;
    println!("{}", dir.join(INDEX_FILE).display());
    Ok(())
}

fn query(_ctx: &Context, a: QueryArgs) -> Result<()> {
    let index = ImageIndex::load(&a.index)?;
    if a.query_files.len() > index.n_max() {
        return Err(Error::Argument(format!(
            "{} query files given but the index holds {} attention step(s) per image",
            a.query_files.len(),
            index.n_max()
        )));
    }
    let params = match (&a.checkpoint, a.embedded) {
        (_, true) => None,
        (Some(p), false) => Some(load_checkpoint(p)?.params),
        (None, false) => return Err(Error::Argument("--checkpoint is required unless --embedded is given".into())),
    };
    let queries = a
        .query_files
        .iter()
        .map(|f| {
            let raw = read_tensor(f)?;
            match &params {
                Some(p) => embed_query(&raw, p),
                None => Embedding::normalize(raw),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank_multi(&queries, &index)?;
    for (id, d) in ranked.top(a.k) {
        println!("{id} {d:.6}");
    }
    Ok(())
}

fn eval(ctx: &Context, a: EvalArgs) -> Result<()> {
    let mut cfg = experiment_config(ctx)?;
    set(&mut cfg.modality, a.modality.map(Into::into));
    cfg.multi |= a.multi;
    set(&mut cfg.pairgen.train_fraction, a.train_fraction);
    cfg.pairgen.seed = cfg.seed;
    let dataset = Dataset::load(&a.manifest)?;
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let index = ImageIndex::load(&a.index)?;
    let (_, test_items) = split_dataset(&dataset.manifest.items, &cfg.pairgen)?;
    let queries = test_queries(&dataset, &test_items, cfg.modality, cfg.multi, &checkpoint.params)?;
    let report = evaluate(&queries, &index, same_class)?;
    let dir = ctx.out_dir()?;
    write(dir.join(EVAL_FILE), report.to_json()?)?;
    println!("mAP {:.6}", report.map);
    Ok(())
}
