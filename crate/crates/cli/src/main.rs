use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fundus_core::config::AppConfig;
use fundus_core::dataset::{generate_synthetic_fundus, read_corpus, split_dataset, write_corpus, DatasetSplit, FundusSample};
use fundus_core::experiments::{compare_backbones, compare_feature_extractors, compare_fusion, Comparison};
use fundus_core::metrics::{mean_row, write_metrics_csv, MetricsRow, PerceptualNet};
use fundus_core::pipeline::{restore_batch, train_restorer, write_history_csv, RestorationResult, RestoreItem, Restorer};
use fundus_core::readability::{evaluate_readability, preprocess, train_readability, ClassifierModel, ReadabilityLabels};
use fundus_core::{Error, ImageTensor, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fundus", version, about = "Readability screening and restoration of fundus-like images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; defaults apply to omitted keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// corpus written by gen-data; generated in memory from the config when absent
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (PNGs plus manifest.jsonl) and its split
    GenData(Common),
    /// Train the readability classifier and report on the test split
    TrainReadability(Common),
    /// Train the conditional restorer
    TrainRestorer(Common),
    /// Screen, restore and re-verify the test split
    Restore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        restorer: PathBuf,
    },
    /// Score a trained classifier on the test split
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classifier: PathBuf,
    },
    CompareBackbones(Common),
    CompareExtractors(Common),
    CompareFusion(Common),
}

struct Context {
    config: AppConfig,
    seed: u64,
    out: PathBuf,
    corpus: Vec<FundusSample>,
    split: DatasetSplit,
}

impl Context {
    fn new(c: &Common) -> Result<Self> {
        let config = match &c.config {
            Some(p) => AppConfig::load(p)?,
            None => AppConfig::default(),
        }
        .with_seed(c.seed);
        let corpus = match &c.data {
            Some(dir) => read_corpus(dir)?,
            None => generate_synthetic_fundus(c.seed, config.data.count, config.data.size, &config.data.generator)?,
        };
        let split = split_dataset(corpus.len(), config.data.split, c.seed)?;
        std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
        Ok(Context {
            config,
            seed: c.seed,
            out: c.out.clone(),
            corpus,
            split,
        })
    }

    fn test_images(&self) -> (Vec<&ImageTensor>, Vec<ReadabilityLabels>) {
        self.split
            .test
            .iter()
            .map(|&i| (&self.corpus[i].image, self.corpus[i].labels))
            .unzip()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn report_readability(ctx: &Context, model: &ClassifierModel) -> Result<()> {
    let (images, truth) = ctx.test_images();
    let report = evaluate_readability(model, &images, &truth)?;
    report.write(&ctx.out)?;
    for l in &report.labels {
        let auc = l.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!("{:<10} accuracy {:.4}  f1 {:.4}  auc {auc}", l.label, l.accuracy, l.f1);
    }
    Ok(())
}

fn comparison(ctx: &Context, stem: &str, table: Comparison) -> Result<()> {
    table.write(&ctx.out, stem)?;
    println!("degraded baseline psnr {:.4}", table.baseline.psnr);
    print!("{}", table.to_csv());
    Ok(())
}

#[derive(Serialize)]
struct RestoreSummary {
    images: usize,
    diffused: usize,
    verified_after_diffusion: usize,
    mean_psnr_degraded: Option<f64>,
    mean_psnr_restored: Option<f64>,
    results: Vec<RestorationResult>,
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let ctx = Context::new(&c)?;
            write_corpus(&ctx.out, &ctx.corpus)?;
            write_json(&ctx.out.join("split.json"), &ctx.split)?;
            println!("wrote {} samples to {}", ctx.corpus.len(), ctx.out.display());
        }
        Command::TrainReadability(c) => {
            let ctx = Context::new(&c)?;
            let (model, history) = train_readability(&ctx.config.readability, &ctx.split, &ctx.corpus, ctx.seed)?;
            model.save(&ctx.out.join("readability.rrgn"))?;
            let mut csv = String::from("epoch,train_loss,val_loss\n");
            for h in &history {
                let val = h.val_loss.map_or(String::new(), |v| format!("{v:.8}"));
                csv.push_str(&format!("{},{:.8},{val}\n", h.epoch, h.train_loss));
            }
            let path = ctx.out.join("readability_history.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            report_readability(&ctx, &model)?;
        }
        Command::TrainRestorer(c) => {
            let ctx = Context::new(&c)?;
            let restorer = train_restorer(&ctx.config.restorer, &ctx.corpus, &ctx.split.train)?;
            restorer.save(&ctx.out.join("restorer.rrgn"))?;
            write_history_csv(&ctx.out.join("restorer_history.csv"), &restorer.loss_history)?;
            if let (Some(first), Some(last)) = (restorer.loss_history.first(), restorer.loss_history.last()) {
                println!("loss {first:.5} -> {last:.5}");
            }
        }
        Command::Restore {
            common,
            classifier,
            restorer,
        } => {
            let ctx = Context::new(&common)?;
            let classifier = ClassifierModel::load(&classifier)?;
            let restorer = Restorer::load(&restorer)?;
            if common.config.is_some() {
                restorer.check_schedule(&ctx.config.restorer.schedule)?;
            }
            let items: Vec<RestoreItem> = ctx
                .split
                .test
                .iter()
                .map(|&i| RestoreItem {
                    id: &ctx.corpus[i].id,
                    image: &ctx.corpus[i].image,
                    clean: Some(&ctx.corpus[i].clean),
                })
                .collect();
            let net = PerceptualNet::fixed_random(ctx.config.experiments.perceptual_seed);
            let results = restore_batch(&items, &classifier, &restorer, &net, ctx.config.experiments.sampling_seed)?;
            let dir = ctx.out.join("restored");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for r in &results {
                r.restored.save_png(&dir.join(format!("{}.png", r.id)))?;
            }
            let rows: Vec<_> = results.iter().filter_map(|r| r.metrics.clone()).collect();
            write_metrics_csv(&ctx.out.join("metrics.csv"), &rows)?;

            // PSNR over the diffused images whose degradation changed them
            let mut before = Vec::new();
            let mut after = Vec::new();
            for (r, it) in results.iter().zip(&items) {
                let (Some(m), Some(clean)) = (&r.metrics, it.clean) else { continue };
                if r.diffused && it.image != clean {
                    let s = restorer.config.image_size;
                    let deg = preprocess(it.image, s)?;
                    let cl = preprocess(clean, s)?;
                    before.push(MetricsRow::compute(&r.id, &cl, &deg, &net)?);
                    after.push(m.clone());
                }
            }
            let mean = |rows: &[MetricsRow]| (!rows.is_empty()).then(|| mean_row("", rows).psnr);
            let summary = RestoreSummary {
                images: results.len(),
                diffused: results.iter().filter(|r| r.diffused).count(),
                verified_after_diffusion: results.iter().filter(|r| r.diffused && r.verified).count(),
                mean_psnr_degraded: mean(&before),
                mean_psnr_restored: mean(&after),
                results,
            };
            write_json(&ctx.out.join("restore_report.json"), &summary)?;
            println!(
                "{} images, {} restored, {} verified after restoration",
                summary.images, summary.diffused, summary.verified_after_diffusion
            );
            if let (Some(a), Some(b)) = (summary.mean_psnr_degraded, summary.mean_psnr_restored) {
                println!("mean psnr {a:.4} -> {b:.4}");
            }
        }
        Command::Evaluate { common, classifier } => {
            let ctx = Context::new(&common)?;
            let model = ClassifierModel::load(&classifier)?;
            report_readability(&ctx, &model)?;
        }
        Command::CompareBackbones(c) => {
            let ctx = Context::new(&c)?;
            let t = compare_backbones(&ctx.config.restorer, &ctx.corpus, &ctx.split, &ctx.config.experiments)?;
            comparison(&ctx, "compare_backbones", t)?;
        }
        Command::CompareExtractors(c) => {
            let ctx = Context::new(&c)?;
            let t = compare_feature_extractors(&ctx.config.restorer, &ctx.corpus, &ctx.split, &ctx.config.experiments)?;
            comparison(&ctx, "compare_extractors", t)?;
        }
        Command::CompareFusion(c) => {
            let ctx = Context::new(&c)?;
            let t = compare_fusion(&ctx.config.restorer, &ctx.corpus, &ctx.split, &ctx.config.experiments)?;
            comparison(&ctx, "compare_fusion", t)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
