//! Command-line workflows. Reports go to stdout as `key=value` lines; the resolved
//! configuration of every run is logged to stderr. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data or format error, 3 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::aggregate::{Aggregator, FrameStack, InputMode};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{ClassPool, Dataset, FeatureBlob, PositiveMode, Split, WorldParams};
use crate::error::{Error, Result};
use crate::geo::{build_groups, classes_adjacent, PartitionParams, UtmPoint};
use crate::loss::{CosfaceParams, LossWeights};
use crate::model::{AdamConfig, LossConfig, Model};
use crate::retrieval::{
    bench_matching, bench_report, build_store, eval_descriptors, extract_descriptors, recall_at_n, BenchConfig,
    EvalOptions, EvalReport, Extractor, QueryMode, RetrievalResult, DEFAULT_RECALL_NS,
};
use crate::seqmatch::{seqmatch_rank, VelocityParams};
use crate::train::{train, SplitData, TrainConfig};

pub const DATABASE_BLOB: &str = "database.spfb";
pub const QUERIES_BLOB: &str = "queries.spfb";

macro_rules! command {
    (
        $(#[$meta:meta])*
        $name:ident {
            $($key:ident = $default:literal : $help:literal,)*
        }
        flags { $($flag:ident : $fhelp:literal,)* }
    ) => {
        $(#[$meta])*
        #[derive(clap::Args, Debug)]
        pub struct $name {
            /// Flat `key = value` config file, applied before command-line flags.
            #[arg(long, value_name = "FILE")]
            config: Option<PathBuf>,
            $(
                #[arg(long, value_name = "VALUE", help = concat!($help, " [default: ", $default, "]"))]
                $key: Option<String>,
            )*
            $(
                #[arg(long, help = $fhelp)]
                $flag: bool,
            )*
        }

        impl $name {
            fn resolve(&self) -> Result<RunConfig> {
                let mut c = RunConfig::new(&[$((stringify!($key), $default),)* $((stringify!($flag), "false"),)*]);
                if let Some(path) = &self.config {
                    c.apply_file(path)?;
                }
                $(if let Some(v) = &self.$key {
                    c.set(stringify!($key), v.clone())?;
                })*
                $(if self.$flag {
                    c.set(stringify!($flag), "true")?;
                })*
                Ok(c)
            }
        }
    };
}

command! {
    /// Generate a synthetic world (manifest.csv + features.spfb).
    GenArgs {
        out = "" : "Output dataset directory",
        seed = "0" : "Generator seed",
        n_trajectories = "15" : "Sequence trajectories (3 of every 5 train, then val, test)",
        places_per_trajectory = "100" : "Places along each trajectory",
        place_spacing = "10" : "Meters between consecutive places",
        raw_dim = "32" : "Raw feature dimension",
        n_conditions = "4" : "Appearance conditions",
        condition_noise = "0.3" : "Per-observation noise std",
        seq_length = "5" : "Frames per sequence",
        im2im_region_offset = "100000" : "Easting offset of the single-image region",
        im2im_trajectories = "6" : "Trajectories in the single-image region",
        im2im_views_per_condition = "1" : "Images per place and condition",
        signal_dim = "16" : "Latent place signature dimension",
        place_correlation = "0.5" : "Correlation of neighbouring place signatures",
        nuisance_rank = "6" : "Rank of the condition appearance subspace",
        nuisance_scale = "1.5" : "Scale of the condition appearance component",
        nuisance_sharing = "0.7" : "Fraction of the appearance subspace shared by all conditions",
        offset_scale = "0.5" : "Scale of per-condition offsets",
        distortion = "0.3" : "Scale of per-condition projection distortion",
        query_stride = "2" : "Start offset between query windows",
    }
    flags {}
}

command! {
    /// Partition the single-image pool into place classes and non-adjacent groups.
    PartitionArgs {
        data = "" : "Dataset directory",
        cell_size = "10" : "Cell side in meters",
        heading_buckets = "12" : "Heading buckets per full turn",
        group_stride_space = "2" : "Spatial group stride",
        group_stride_heading = "2" : "Heading group stride",
        rotation_period = "25" : "Iterations per active group",
        out = "" : "Optional CSV of classes with their group",
    }
    flags {}
}

command! {
    /// Train the joint model and write checkpoints plus loss and validation logs.
    TrainArgs {
        data = "" : "Dataset directory",
        out = "" : "Output directory",
        seed = "0" : "Training seed",
        iterations = "2000" : "Training iterations",
        seq_batch = "4" : "Triplets per iteration",
        im_batch = "32" : "Single images per iteration",
        lr = "0.003" : "Adam learning rate",
        lambda_seq = "10000" : "Sequence loss weight",
        lambda_im = "100" : "Single-image loss weight",
        triplet_margin = "0.1" : "Triplet margin",
        cosface_scale = "30" : "CosFace scale",
        cosface_margin = "0.4" : "CosFace margin",
        encoder = "affine" : "Frame encoder: identity, affine, mlp2",
        enc_dim = "0" : "Encoder output dim (0 = raw dim)",
        hidden = "64" : "Hidden width of mlp2",
        dim = "256" : "Descriptor dimension",
        input_mode = "clamp" : "Pooling input handling: clamp or signed",
        cell_size = "10" : "Cell side in meters",
        heading_buckets = "12" : "Heading buckets per full turn",
        group_stride_space = "2" : "Spatial group stride",
        group_stride_heading = "2" : "Heading group stride",
        rotation_period = "25" : "Iterations per active group",
        cache_size = "1000" : "Database items in the mining cache",
        cache_refresh = "250" : "Iterations between cache refreshes",
        positive_mode = "nearest" : "Positive choice: nearest or best_of",
        log_every = "50" : "Iterations between loss log rows",
        eval_every = "250" : "Iterations between validation runs",
        eval_split = "test" : "Split evaluated by --eval-after",
        threads = "1" : "Threads for evaluation",
    }
    flags {
        prenorm_frames : "L2-normalize whitened frames before pooling",
        eval_after : "Evaluate the final model after training",
    }
}

command! {
    /// Extract database and query descriptors to feature blobs.
    ExtractArgs {
        data = "" : "Dataset directory",
        out = "" : "Output directory",
        checkpoint = "" : "Checkpoint (empty = raw features)",
        aggregator = "seqgem" : "seqgem, avg, max or concat",
        split = "test" : "Split to extract",
        seq_length = "0" : "Use the first N frames of each sequence (0 = all)",
        threads = "1" : "Extraction threads",
    }
    flags {
        reverse_queries : "Reverse query frame order",
    }
}

command! {
    /// Recall@N and precision-recall evaluation.
    EvalArgs {
        data = "" : "Dataset directory",
        split = "test" : "Split to evaluate",
        checkpoint = "" : "Checkpoint (empty = raw features)",
        descriptors = "" : "Directory of extracted descriptors (skips extraction)",
        aggregator = "seqgem" : "seqgem, avg, max or concat",
        dim = "0" : "Expected descriptor dimension (0 = any)",
        seq_length = "0" : "Use the first N frames of each sequence (0 = all)",
        threads = "1" : "Extraction threads",
        pr_out = "" : "Optional precision-recall CSV path",
    }
    flags {
        reverse_queries : "Reverse query frame order",
        with_timing : "Include wall-clock timings in the report",
    }
}

command! {
    /// Frame-by-frame sequence matching baseline with comparison counts.
    SeqmatchArgs {
        data = "" : "Dataset directory",
        split = "test" : "Split to evaluate",
        checkpoint = "" : "Checkpoint for frame descriptors (empty = raw features)",
        v_min = "0.8" : "Slowest line velocity",
        v_max = "1.2" : "Fastest line velocity",
        v_steps = "5" : "Velocities sampled",
        max_queries = "0" : "Evaluate only the first N queries (0 = all)",
        threads = "1" : "Scoring threads",
    }
    flags {}
}

command! {
    /// Matching-time benchmark and storage estimates.
    BenchArgs {
        dims = "64,128,256,512,4096" : "Descriptor dimensions",
        db_size = "13584" : "Database size",
        repetitions = "21" : "Timed repetitions",
        warmup = "3" : "Untimed warm-up repetitions",
        queries_per_rep = "4" : "Queries per repetition",
        seed = "0" : "Seed for random descriptors",
        storage = "800000:512:4,800000:24576:4" : "Storage estimates as n:dim:bytes",
        csv_out = "" : "Optional CSV of the timing table",
    }
    flags {}
}

#[derive(Parser, Debug)]
#[command(name = "seqvpr", version, about = "Sequence descriptors for visual place recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    Gen(GenArgs),
    Partition(PartitionArgs),
    Train(TrainArgs),
    Extract(ExtractArgs),
    Eval(EvalArgs),
    Seqmatch(SeqmatchArgs),
    Bench(BenchArgs),
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.render().to_string();
            let reason = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {reason}");
            for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                eprintln!("{line}");
            }
            return 1;
        }
    };
    match dispatch(&cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            let kind = match e.exit_code() {
                1 => "config",
                3 => "numeric",
                _ => "data",
            };
            eprintln!("error[{kind}]: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn log_config(name: &str, cfg: &RunConfig) {
    eprintln!("# seqvpr {name}: resolved config");
    for line in cfg.render().lines() {
        eprintln!("#   {line}");
    }
}

fn dispatch(cmd: &Command) -> Result<String> {
    let (name, cfg) = match cmd {
        Command::Gen(a) => ("gen", a.resolve()?),
        Command::Partition(a) => ("partition", a.resolve()?),
        Command::Train(a) => ("train", a.resolve()?),
        Command::Extract(a) => ("extract", a.resolve()?),
        Command::Eval(a) => ("eval", a.resolve()?),
        Command::Seqmatch(a) => ("seqmatch", a.resolve()?),
        Command::Bench(a) => ("bench", a.resolve()?),
    };
    log_config(name, &cfg);
    match cmd {
        Command::Gen(_) => cmd_gen(&cfg),
        Command::Partition(_) => cmd_partition(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Extract(_) => cmd_extract(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Seqmatch(_) => cmd_seqmatch(&cfg),
        Command::Bench(_) => cmd_bench(&cfg),
    }
}

fn world_params(c: &RunConfig) -> Result<WorldParams> {
    Ok(WorldParams {
        n_trajectories: c.get("n_trajectories")?,
        places_per_trajectory: c.get("places_per_trajectory")?,
        place_spacing: c.get("place_spacing")?,
        raw_dim: c.get("raw_dim")?,
        n_conditions: c.get("n_conditions")?,
        condition_noise: c.get("condition_noise")?,
        seq_length: c.get("seq_length")?,
        im2im_region_offset: c.get("im2im_region_offset")?,
        im2im_trajectories: c.get("im2im_trajectories")?,
        im2im_views_per_condition: c.get("im2im_views_per_condition")?,
        signal_dim: c.get("signal_dim")?,
        place_correlation: c.get("place_correlation")?,
        nuisance_rank: c.get("nuisance_rank")?,
        nuisance_scale: c.get("nuisance_scale")?,
        nuisance_sharing: c.get("nuisance_sharing")?,
        offset_scale: c.get("offset_scale")?,
        distortion: c.get("distortion")?,
        query_stride: c.get("query_stride")?,
    })
}

fn partition_params(c: &RunConfig) -> Result<PartitionParams> {
    let p = PartitionParams {
        cell_size: c.get("cell_size")?,
        heading_buckets: c.get("heading_buckets")?,
        group_stride_space: c.get("group_stride_space")?,
        group_stride_heading: c.get("group_stride_heading")?,
    };
    p.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(p)
}

fn load_dataset(c: &RunConfig) -> Result<Dataset> {
    Dataset::read(Path::new(c.require("data")?))
}

fn cmd_gen(c: &RunConfig) -> Result<String> {
    let out = PathBuf::from(c.require("out")?);
    let params = world_params(c)?;
    params.validate().map_err(|e| Error::Config(e.to_string()))?;
    let ds = crate::data::gen_world(&params, c.get("seed")?)?;
    ds.write(&out)?;
    fs::write(out.join("config.txt"), c.render())?;
    let mut s = String::new();
    let _ = writeln!(s, "frames={}", ds.frames.len());
    let _ = writeln!(s, "feature_rows={}", ds.blob.count());
    let _ = writeln!(s, "raw_dim={}", ds.raw_dim());
    for split in [Split::Train, Split::Val, Split::Test] {
        for role in [crate::data::Role::Database, crate::data::Role::Query] {
            let _ = writeln!(s, "{split}_{role}_sequences={}", ds.sequences(split, role).len());
        }
    }
    let _ = writeln!(s, "im2im_images={}", ds.im2im_frames().len());
    Ok(s)
}

fn cmd_partition(c: &RunConfig) -> Result<String> {
    let ds = load_dataset(c)?;
    let params = partition_params(c)?;
    let pool = ClassPool::new(&ds, &params)?;
    let schedule = build_groups(pool.classes.clone(), &params, c.get("rotation_period")?)?;
    let mut s = String::new();
    let _ = writeln!(s, "classes={}", pool.classes.len());
    let _ = writeln!(s, "images={}", pool.members.iter().map(Vec::len).sum::<usize>());
    let _ = writeln!(s, "groups={}", schedule.len());
    let mut adjacent = 0usize;
    for (g, members) in schedule.groups.iter().enumerate() {
        let _ = writeln!(s, "group_size[{g}]={}", members.len());
        for (i, a) in members.iter().enumerate() {
            adjacent += members[i + 1..].iter().filter(|b| classes_adjacent(a, b, params.heading_buckets)).count();
        }
    }
    let _ = writeln!(s, "adjacent_pairs_within_groups={adjacent}");
    if let Some(out) = c.get_opt::<PathBuf>("out")? {
        let mut csv = String::from("cell_u,cell_v,heading_bucket,group,images\n");
        for (g, members) in schedule.groups.iter().enumerate() {
            for class in members {
                let n = pool.members_of(class).map_or(0, <[usize]>::len);
                let _ = writeln!(csv, "{},{},{},{g},{n}", class.cell_u, class.cell_v, class.heading_bucket);
            }
        }
        fs::write(out, csv)?;
    }
    Ok(s)
}

fn parse_input_mode(s: &str) -> Result<InputMode> {
    match s {
        "clamp" => Ok(InputMode::Clamp),
        "signed" => Ok(InputMode::Signed),
        other => Err(Error::Config(format!("unknown input_mode '{other}'"))),
    }
}

fn parse_positive_mode(s: &str) -> Result<PositiveMode> {
    match s {
        "nearest" => Ok(PositiveMode::Nearest),
        "best_of" => Ok(PositiveMode::BestOf),
        other => Err(Error::Config(format!("unknown positive_mode '{other}'"))),
    }
}

fn train_config(c: &RunConfig) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        iterations: c.get("iterations")?,
        seq_batch: c.get("seq_batch")?,
        im_batch: c.get("im_batch")?,
        adam: AdamConfig { lr: c.get("lr")?, ..AdamConfig::default() },
        losses: LossConfig {
            weights: LossWeights { seq2seq: c.get("lambda_seq")?, im2im: c.get("lambda_im")? },
            triplet_margin: c.get("triplet_margin")?,
            cosface: CosfaceParams { scale: c.get("cosface_scale")?, margin: c.get("cosface_margin")? },
        },
        encoder: c.get("encoder")?,
        enc_dim: c.get("enc_dim")?,
        hidden: c.get("hidden")?,
        out_dim: c.get("dim")?,
        input_mode: parse_input_mode(c.raw("input_mode"))?,
        prenorm_frames: c.get("prenorm_frames")?,
        partition: partition_params(c)?,
        rotation_period: c.get("rotation_period")?,
        cache_size: c.get("cache_size")?,
        cache_refresh: c.get("cache_refresh")?,
        positive_mode: parse_positive_mode(c.raw("positive_mode"))?,
        log_every: c.get("log_every")?,
        eval_every: c.get("eval_every")?,
        seed: c.get("seed")?,
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(c: &RunConfig) -> Result<String> {
    let cfg = train_config(c)?;
    let out = PathBuf::from(c.require("out")?);
    let eval_split: Split = c.get("eval_split")?;
    let threads: usize = c.get("threads")?;
    let ds = load_dataset(c)?;
    let outcome = train(&cfg, &ds)?;

    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), c.render())?;
    fs::write(out.join("train_log.csv"), outcome.log_csv())?;
    fs::write(out.join("val_curve.csv"), outcome.eval_csv())?;
    let final_ck = Checkpoint { state: outcome.state.clone(), partition: cfg.partition };
    final_ck.save(&out.join("model.ckpt"))?;
    if let Some(best) = &outcome.best {
        let mut state = outcome.state.clone();
        state.model = best.model.clone();
        Checkpoint { state, partition: cfg.partition }.save(&out.join("best.ckpt"))?;
    }

    let mut s = String::new();
    let _ = writeln!(s, "iterations={}", outcome.state.iteration);
    let _ = writeln!(s, "descriptor_dim={}", outcome.state.model.out_dim());
    let _ = writeln!(s, "p={}", outcome.state.model.p());
    if let Some(r) = outcome.final_val_r1() {
        let _ = writeln!(s, "final_val_recall@1={r:.4}");
    }
    if let Some(b) = &outcome.best {
        let _ = writeln!(s, "best_iteration={}", b.iteration);
        let _ = writeln!(s, "best_val_recall@1={:.4}", b.val_r1);
    }
    if c.get::<bool>("eval_after")? {
        let data = split_data(&ds, eval_split, 0)?;
        let model = &outcome.state.model;
        let opts = EvalOptions { threads, ..EvalOptions::default() };
        let report = data.evaluate(&Extractor::Model(model, Aggregator::SeqGem), &opts)?;
        fs::write(out.join("eval.txt"), report.to_kv(false))?;
        fs::write(out.join("pr.csv"), report.pr_csv())?;
        s.push_str(&report.to_kv(false));
    }
    Ok(s)
}

fn prefix(stack: &FrameStack, len: usize) -> Result<FrameStack> {
    if len > stack.len() {
        return Err(Error::Config(format!("seq_length {len} exceeds the stored length {}", stack.len())));
    }
    FrameStack::from_flat(stack.as_flat()[..len * stack.dim()].to_vec(), len, stack.dim())
}

/// Split data, optionally cut to the first `seq_length` frames.
fn split_data(ds: &Dataset, split: Split, seq_length: usize) -> Result<SplitData> {
    let mut data = SplitData::new(ds, split);
    if data.is_empty() {
        return Err(Error::invalid(format!("split {split} has no database or no queries")));
    }
    if seq_length > 0 {
        let cut = |stacks: &mut Vec<FrameStack>, pos: &mut Vec<Vec<UtmPoint>>| -> Result<()> {
            for s in stacks.iter_mut() {
                *s = prefix(s, seq_length)?;
            }
            for p in pos.iter_mut() {
                p.truncate(seq_length);
            }
            Ok(())
        };
        cut(&mut data.database, &mut data.db_positions)?;
        cut(&mut data.queries, &mut data.query_positions)?;
    }
    Ok(data)
}

fn load_model(c: &RunConfig) -> Result<Option<Model>> {
    Ok(match c.get_opt::<PathBuf>("checkpoint")? {
        Some(path) => Some(Checkpoint::load(&path)?.state.model),
        None => None,
    })
}

fn extractor<'a>(model: Option<&'a Model>, aggregator: Aggregator) -> Extractor<'a> {
    match model {
        Some(m) => Extractor::Model(m, aggregator),
        None => Extractor::Raw(aggregator),
    }
}

fn query_mode(c: &RunConfig) -> Result<QueryMode> {
    Ok(if c.get::<bool>("reverse_queries")? { QueryMode::Reversed } else { QueryMode::Forward })
}

fn to_blob(descs: &[Vec<f64>]) -> Result<FeatureBlob> {
    let dim = descs.first().map_or(0, Vec::len);
    FeatureBlob::new(dim, descs.iter().flat_map(|d| d.iter().map(|v| *v as f32)).collect())
}

fn cmd_extract(c: &RunConfig) -> Result<String> {
    let ds = load_dataset(c)?;
    let out = PathBuf::from(c.require("out")?);
    let model = load_model(c)?;
    let aggregator: Aggregator = c.get("aggregator")?;
    let data = split_data(&ds, c.get("split")?, c.get("seq_length")?)?;
    let threads: usize = c.get("threads")?;
    let ex = extractor(model.as_ref(), aggregator);
    let db = extract_descriptors(&data.database, &ex, QueryMode::Forward, threads)?;
    let queries = extract_descriptors(&data.queries, &ex, query_mode(c)?, threads)?;
    fs::create_dir_all(&out)?;
    to_blob(&db)?.write_file(&out.join(DATABASE_BLOB))?;
    to_blob(&queries)?.write_file(&out.join(QUERIES_BLOB))?;
    let mut s = String::new();
    let _ = writeln!(s, "aggregator={aggregator}");
    let _ = writeln!(s, "descriptor_dim={}", db[0].len());
    let _ = writeln!(s, "database={}", db.len());
    let _ = writeln!(s, "queries={}", queries.len());
    Ok(s)
}

fn read_descriptors(path: &Path, expected: usize) -> Result<Vec<Vec<f64>>> {
    let blob = FeatureBlob::read_file(path)?;
    if blob.count() != expected {
        return Err(Error::Integrity(format!(
            "{} holds {} descriptors but the split has {expected} sequences",
            path.display(),
            blob.count()
        )));
    }
    Ok((0..blob.count()).map(|i| blob.row_f64(i)).collect())
}

fn cmd_eval(c: &RunConfig) -> Result<String> {
    let ds = load_dataset(c)?;
    let aggregator: Aggregator = c.get("aggregator")?;
    let data = split_data(&ds, c.get("split")?, c.get("seq_length")?)?;
    let mode = query_mode(c)?;
    let opts = EvalOptions { mode, threads: c.get("threads")?, ..EvalOptions::default() };
    let report: EvalReport = match c.get_opt::<PathBuf>("descriptors")? {
        Some(dir) => {
            if mode == QueryMode::Reversed || !c.raw("checkpoint").is_empty() {
                return Err(Error::Config(
                    "descriptors are precomputed; reverse_queries and checkpoint apply at extraction".into(),
                ));
            }
            let db = read_descriptors(&dir.join(DATABASE_BLOB), data.database.len())?;
            let queries = read_descriptors(&dir.join(QUERIES_BLOB), data.queries.len())?;
            let store = build_store(&db, data.db_positions.clone())?;
            eval_descriptors(&store, &queries, &data.query_positions, &aggregator.to_string(), &opts)?
        }
        None => {
            let model = load_model(c)?;
            data.evaluate(&extractor(model.as_ref(), aggregator), &opts)?
        }
    };
    let expected: usize = c.get("dim")?;
    if expected != 0 && expected != report.dim {
        return Err(Error::Config(format!("descriptor dim is {} but dim = {expected} was requested", report.dim)));
    }
    if let Some(path) = c.get_opt::<PathBuf>("pr_out")? {
        fs::write(path, report.pr_csv())?;
    }
    Ok(report.to_kv(c.get("with_timing")?))
}

fn frame_descriptors(stack: &FrameStack, model: Option<&Model>) -> Result<FrameStack> {
    match model {
        None => Ok(stack.clone()),
        Some(m) => {
            let rows = (0..stack.len()).map(|i| m.im_descriptor(stack.frame(i))).collect::<Result<Vec<_>>>()?;
            FrameStack::new(&rows)
        }
    }
}

fn cmd_seqmatch(c: &RunConfig) -> Result<String> {
    let ds = load_dataset(c)?;
    let data = split_data(&ds, c.get("split")?, 0)?;
    let model = load_model(c)?;
    let v = VelocityParams { v_min: c.get("v_min")?, v_max: c.get("v_max")?, v_steps: c.get("v_steps")? };
    v.validate().map_err(|e| Error::Config(e.to_string()))?;
    let threads: usize = c.get("threads")?;
    let max_queries: usize = c.get("max_queries")?;
    let n_queries = if max_queries == 0 { data.queries.len() } else { max_queries.min(data.queries.len()) };

    let db = data.database.iter().map(|s| frame_descriptors(s, model.as_ref())).collect::<Result<Vec<_>>>()?;
    let max_n = *DEFAULT_RECALL_NS.iter().max().unwrap_or(&1);
    let mut results = Vec::with_capacity(n_queries);
    let mut frame_comparisons = 0u64;
    for q in &data.queries[..n_queries] {
        let r = seqmatch_rank(&frame_descriptors(q, model.as_ref())?, &db, max_n, &v, threads)?;
        frame_comparisons += r.frame_comparisons;
        results.push(RetrievalResult {
            distances: r.scores.iter().map(|s| -s).collect(),
            truncated: r.indices.len() < max_n,
            indices: r.indices,
            distance_evals: 0,
        });
    }
    let qpos = &data.query_positions[..n_queries];
    let recalls = recall_at_n(&results, qpos, &data.db_positions, &DEFAULT_RECALL_NS, crate::geo::MATCH_THRESHOLD_M)?;
    let descriptor_comparisons = (n_queries * db.len()) as u64;
    let mut s = String::new();
    let _ = writeln!(s, "method=seqmatch");
    let _ = writeln!(s, "queries={n_queries}");
    let _ = writeln!(s, "database={}", db.len());
    for (n, r) in recalls {
        let _ = writeln!(s, "recall@{n}={r:.4}");
    }
    let _ = writeln!(s, "frame_comparisons={frame_comparisons}");
    let _ = writeln!(s, "descriptor_comparisons={descriptor_comparisons}");
    let _ = writeln!(s, "comparison_ratio={:.4}", frame_comparisons as f64 / descriptor_comparisons.max(1) as f64);
    Ok(s)
}

fn cmd_bench(c: &RunConfig) -> Result<String> {
    let dims: Vec<usize> = c.get_list("dims")?;
    if dims.is_empty() {
        return Err(Error::Config("dims is empty".into()));
    }
    let cfg = BenchConfig {
        db_size: c.get("db_size")?,
        repetitions: c.get("repetitions")?,
        warmup: c.get("warmup")?,
        queries_per_rep: c.get("queries_per_rep")?,
        seed: c.get("seed")?,
    };
    let storage = c
        .get_list::<String>("storage")?
        .iter()
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let bad = || Error::Config(format!("storage item '{item}' is not n:dim:bytes"));
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok((
                parts[0].parse().map_err(|_| bad())?,
                parts[1].parse().map_err(|_| bad())?,
                parts[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect::<Result<Vec<(u64, u64, u64)>>>()?;
    let rows = bench_matching(&dims, &cfg)?;
    if let Some(path) = c.get_opt::<PathBuf>("csv_out")? {
        let mut csv = String::from("dim,db_size,median_ms,min_ms,max_ms,distance_evals_per_query\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{:.6},{:.6},{:.6},{}",
                r.dim, r.db_size, r.median_ms, r.min_ms, r.max_ms, r.distance_evals_per_query
            );
        }
        fs::write(path, csv)?;
    }
    bench_report(&rows, &storage)
}
