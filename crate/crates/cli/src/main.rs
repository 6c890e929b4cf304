use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};

use imnav::agent::attention_probe;
use imnav::dataset::{read_dataset, read_imaginations, write_dataset, write_imaginations, Dataset, ImaginationPolicy};
use imnav::eval::{metrics_table, write_tsv, MetricsRecord};
use imnav::harness::{
    base_trainer, evaluate_condition, parse_metrics, run_ablation, summarize, summary_table, training_inputs,
    variant_trainer, verdicts, write_summary_tsv, Condition, ExperimentSpec, MetricsRow, Variant,
};
use imnav::imagination::ImaginationSet;
use imnav::training::{write_curves, Checkpoint, Trainer};
use imnav::world::Split;
use imnav::Error;

/// Visual imagination for desk-scale vision-and-language navigation.
#[derive(Parser)]
#[command(name = "imnav", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a single world (a corpus file without episodes).
    GenWorld {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Experiment spec whose [corpus] settings to use.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Corpus setting override, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate worlds, episodes and instructions for every split.
    GenCorpus {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate one imagination per kept sub-instruction.
    Imagine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Experiment spec whose [imagination] settings to use.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Pretrain the base agent, finetune a variant, or resume either.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        imaginations: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Experiment spec with the [agent], [pretrain] and [train] settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Variant to finetune from `--base`; pretrains the base when absent.
        #[arg(long)]
        variant: Option<Variant>,
        /// Pretrained base checkpoint.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Continue from a checkpoint; pass the same `--variant` it was started with.
        #[arg(long, conflicts_with = "base")]
        resume: Option<PathBuf>,
        /// Stop after this many iterations in total.
        #[arg(long)]
        until: Option<usize>,
        /// Write the loss curves (tab-separated) here.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Split for the periodic success-rate measurements in the curves.
        #[arg(long)]
        val_split: Option<Split>,
    },
    /// Evaluate a checkpoint under one condition on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        imaginations: PathBuf,
        #[arg(long, default_value = "val_unseen")]
        split: Split,
        #[arg(long, default_value = "imagine")]
        condition: Condition,
        /// Seed of the observation noise and the wrong-imagination shuffle.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment spec with the radius, step limit and verdict split.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Metrics file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a whole ablation matrix from a spec file.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        /// Replace the spec's seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Per-run metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Summary file (means and standard deviations).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Show where an imagination attends, at the first step its landmark is in view.
    ProbeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        imaginations: PathBuf,
        #[arg(long)]
        episode: usize,
        #[arg(long, default_value_t = 0)]
        slot: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, default_value_t = 3)]
        top: usize,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Merge metrics files into per-condition means and verdicts.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "val_unseen")]
        verdict_split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Header lines naming the producing command and seed.
fn header(seed: Option<u64>) -> Vec<String> {
    let args: Vec<String> = std::env::args().collect();
    let mut h = vec![format!("command: {}", args.join(" "))];
    if let Some(s) = seed {
        h.push(format!("seed: {s}"));
    }
    h
}

fn comment(header: &[String]) -> String {
    header.iter().map(|h| format!("# {h}\n")).collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_spec(path: Option<&Path>) -> Result<ExperimentSpec> {
    match path {
        Some(p) => ExperimentSpec::parse(&read(p)?).with_context(|| format!("in {}", p.display())),
        None => Ok(ExperimentSpec::default()),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn load_imaginations(path: &Path, ds: &Dataset) -> Result<ImaginationSet> {
    read_imaginations(&read(path)?, ds.library.d_v).with_context(|| format!("in {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_dataset(path: &Path, ds: &Dataset, seed: u64) -> Result<()> {
    let mut out = Vec::new();
    write_dataset(&mut out, ds, &header(Some(seed)))?;
    write(path, &out)
}

fn metrics_text(records: &[MetricsRecord], seed: Option<u64>) -> Result<Vec<u8>> {
    let mut out = comment(&header(seed)).into_bytes();
    write_tsv(&mut out, records)?;
    Ok(out)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenWorld { seed, out, spec, split, overrides } => {
            let mut spec = load_spec(spec.as_deref())?;
            apply_overrides(&mut spec, &overrides)?;
            let mut corpus = spec.corpus.clone();
            corpus.worlds = [0; 3];
            corpus.episodes = [0; 3];
            corpus.worlds[Split::ALL.iter().position(|&s| s == split).expect("listed")] = 1;
            save_dataset(&out, &Dataset::generate(&corpus, seed)?, seed)
        }
        Command::GenCorpus { seed, out, spec, overrides } => {
            let mut spec = load_spec(spec.as_deref())?;
            apply_overrides(&mut spec, &overrides)?;
            let ds = Dataset::generate(&spec.corpus, seed)?;
            save_dataset(&out, &ds, seed)?;
            eprintln!("{} worlds, {} episodes, vocabulary {}", ds.worlds.len(), ds.episodes.len(), ds.vocab.len());
            Ok(())
        }
        Command::Imagine { data, seed, out, spec } => {
            let spec = load_spec(spec.as_deref())?;
            let ds = load_data(&data)?;
            let set = ds.imagine(&spec.imagination, seed)?;
            let mut buf = Vec::new();
            write_imaginations(&mut buf, &set, &header(Some(seed)))?;
            write(&out, &buf)?;
            eprintln!("{} imaginations for {} instructions", set.values().map(Vec::len).sum::<usize>(), set.len());
            Ok(())
        }
        Command::Train { data, imaginations, seed, out, spec, variant, base, resume, until, curves, val_split } => {
            let spec = load_spec(spec.as_deref())?;
            let ds = load_data(&data)?;
            let set = load_imaginations(&imaginations, &ds)?;
            let mut trainer = match (&resume, &base, variant) {
                (Some(r), _, _) => {
                    let ck = load_checkpoint(r)?;
                    ensure!(ck.train.seed == seed, "checkpoint was trained with seed {}, not {seed}", ck.train.seed);
                    Trainer::from_checkpoint(ck)?
                }
                (None, Some(b), Some(v)) => variant_trainer(&spec, &ds, &load_checkpoint(b)?.agent, v, seed)?,
                (None, None, Some(v)) => bail!("finetuning {v} needs the pretrained --base checkpoint"),
                (None, Some(_), None) => bail!("--base needs a --variant to finetune"),
                (None, None, None) => base_trainer(&spec, &ds, seed)?,
            };
            let inputs = training_inputs(&ds, &set, variant)?;
            let val = match val_split {
                Some(s) => {
                    let policy = match variant {
                        Some(v) if v.uses_imaginations() => ImaginationPolicy::Correct,
                        _ => ImaginationPolicy::Absent,
                    };
                    ds.inputs(s, &set, policy, seed)?
                }
                None => Vec::new(),
            };
            let target = until.unwrap_or(trainer.config.iterations);
            let mut points = Vec::new();
            if let Err(e) = trainer.run_until(&inputs, &val, target, &mut points) {
                if matches!(e, Error::NonFinite(_)) {
                    let dump = out.with_extension("nonfinite");
                    trainer.checkpoint().save(&dump)?;
                    eprintln!("state before the failing step saved to {}", dump.display());
                }
                return Err(e.into());
            }
            trainer.checkpoint().save(&out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = curves {
                let mut buf = comment(&header(Some(seed))).into_bytes();
                write_curves(&mut buf, &points)?;
                write(&path, &buf)?;
            }
            eprintln!("trained to iteration {} of {}", trainer.iteration, trainer.config.iterations);
            Ok(())
        }
        Command::Eval { checkpoint, data, imaginations, split, condition, seed, spec, out } => {
            let spec = load_spec(spec.as_deref())?;
            let ds = load_data(&data)?;
            let set = load_imaginations(&imaginations, &ds)?;
            let agent = load_checkpoint(&checkpoint)?.agent;
            let records = evaluate_condition(&spec, &ds, &set, &agent, condition, split, seed)?;
            match out {
                Some(p) => {
                    write(&p, &metrics_text(&records, Some(seed))?)?;
                    println!("{}", metrics_table(&records));
                }
                None => io::stdout().write_all(&metrics_text(&records, Some(seed))?)?,
            }
            Ok(())
        }
        Command::Ablate { spec: path, seeds, out, summary } => {
            let mut spec = load_spec(Some(&path))?;
            if let Some(s) = seeds {
                spec.seeds = s;
            }
            let ab = run_ablation(&spec, &mut |line| eprintln!("{line}"))?;
            let seed_line = spec.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
            let mut h = header(None);
            h.push(format!("seeds: {seed_line}"));
            if let Some(p) = out {
                let mut buf = comment(&h).into_bytes();
                write_tsv(&mut buf, &ab.records)?;
                write(&p, &buf)?;
            }
            if let Some(p) = summary {
                write(&p, (comment(&h) + &write_summary_tsv(&ab.summary)).as_bytes())?;
            }
            println!("{}", summary_table(&ab.summary));
            for v in &ab.verdicts {
                println!("{v}");
            }
            Ok(())
        }
        Command::ProbeAttention { checkpoint, data, imaginations, episode, slot, layer, head, top, spec } => {
            let spec = load_spec(spec.as_deref())?;
            let ds = load_data(&data)?;
            let set = load_imaginations(&imaginations, &ds)?;
            let agent = load_checkpoint(&checkpoint)?.agent;
            let i = ds.episodes.iter().position(|e| e.id == episode).with_context(|| format!("no episode {episode}"))?;
            let ep = &ds.episodes[i];
            let world = ds.world(ep.world)?;
            let im = set
                .get(&episode)
                .and_then(|l| l.get(slot))
                .with_context(|| format!("episode {episode} has no imagination {slot}"))?;
            let split_inputs = ds.inputs(world.split, &set, ImaginationPolicy::Correct, 0)?;
            let input = split_inputs
                .iter()
                .find(|x| x.episode.id == episode)
                .with_context(|| format!("episode {episode} is not in its world's split"))?;
            let traj = agent.run(input, spec.max_steps, true)?;
            let probe = attention_probe(&traj, world, layer, head, slot, im.true_class, top)?;
            let tokens = &ds.instructions[i].tokens;
            let class = ds.library.class(im.true_class)?;
            println!("landmark {} ({}) in view at step {}", class.id, class.phrase_text(), probe.step);
            let words: Vec<String> = probe.text.iter().map(|&p| format!("{p}:{}", tokens.get(p).map_or("?", String::as_str))).collect();
            println!("top instruction tokens: {}", words.join(" "));
            let views: Vec<String> = probe
                .views
                .iter()
                .map(|&v| match world.class_at(traj.visited[probe.step], v) {
                    Some(c) if c == im.true_class => format!("{v}*"),
                    _ => v.to_string(),
                })
                .collect();
            println!("top views (* shows the landmark): {}", views.join(" "));
            Ok(())
        }
        Command::Report { metrics, verdict_split, out } => {
            let mut rows: Vec<MetricsRow> = Vec::new();
            for p in &metrics {
                rows.extend(parse_metrics(&read(p)?).with_context(|| format!("in {}", p.display()))?);
            }
            let summary = summarize(&rows);
            if let Some(p) = out {
                let mut h = header(None);
                h.push(format!("rows: {}", rows.len()));
                write(&p, (comment(&h) + &write_summary_tsv(&summary)).as_bytes())?;
            }
            println!("{}", summary_table(&summary));
            for v in verdicts(&summary, verdict_split.as_str()) {
                println!("{v}");
            }
            Ok(())
        }
    }
}

fn apply_overrides(spec: &mut ExperimentSpec, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
        spec.corpus.set(k.trim(), v.trim())?;
    }
    spec.corpus.validate()?;
    Ok(())
}
