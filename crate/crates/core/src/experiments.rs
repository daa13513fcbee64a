//! Ablation harnesses. Each variant trains a restorer from the same base
//! configuration and seed, restores the same degraded test images and is
//! scored against their clean originals. Test images whose degradation left
//! them unchanged are skipped, since their PSNR is infinite.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condfeat::ExtractorKind;
use crate::dataset::{DatasetSplit, FundusSample};
use crate::diffusion::Backbone;
use crate::error::{invalid, Error, Result};
use crate::fusion::FusionStrategy;
use crate::image::ImageTensor;
use crate::metrics::{fmt6, mean_row, MetricsRow, PerceptualNet, PERCEPTUAL_SEED};
use crate::pipeline::{fit, train_restorer, RestorerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// degraded test images scored per variant; all of them when absent
    pub eval_limit: Option<usize>,
    pub perceptual_seed: u64,
    /// seed of the forward noise that starts each restoration chain
    pub sampling_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            eval_limit: None,
            perceptual_seed: PERCEPTUAL_SEED,
            sampling_seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_limit == Some(0) {
            return Err(Error::Config("experiments.eval_limit must be >= 1 when given".into()));
        }
        Ok(())
    }
}

/// Published scores kept next to a table for comparison only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Reference {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

const fn reference(psnr: f64, ssim: f64, lpips: f64) -> Option<Reference> {
    Some(Reference { psnr, ssim, lpips })
}

/// Full-scale scores of the extractor variants, in `ExtractorKind::COMPARED` order.
pub const EXTRACTOR_REFERENCE: [Option<Reference>; 8] = [
    reference(27.0733, 0.9461, 0.1736),
    reference(25.7213, 0.9445, 0.2383),
    reference(25.8058, 0.9320, 0.2092),
    reference(27.4521, 0.9556, 0.1911),
    reference(26.4427, 0.9446, 0.1836),
    reference(24.8090, 0.9106, 0.2038),
    reference(26.5226, 0.9458, 0.1939),
    reference(26.5648, 0.9202, 0.1511),
];

/// Full-scale scores of the fusion strategies, in `FusionStrategy::ALL`
/// order. Bilinear + static is the final configuration, whose scores are
/// the overall best result.
pub const FUSION_REFERENCE: [Option<Reference>; 4] = [
    reference(11.99, 0.350, 0.546),
    reference(12.21, 0.681, 0.329),
    reference(27.4521, 0.9556, 0.1911),
    reference(15.26, 0.713, 0.271),
];

/// Where reference scores go when a table is written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceLayout {
    None,
    /// extra `reference_*` columns in the table itself
    Columns,
    /// a separate `<stem>_reference.csv`
    SeparateFile,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    /// `id` is the variant key
    pub scores: MetricsRow,
    pub reference: Option<Reference>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    /// name of the first CSV column
    pub column: &'static str,
    pub rows: Vec<ComparisonRow>,
    /// the degraded inputs scored against the clean images
    pub baseline: MetricsRow,
    pub eval_ids: Vec<String>,
    pub reference_layout: ReferenceLayout,
}

impl Comparison {
    pub fn header(&self) -> String {
        let mut h = format!("{},psnr,ssim,lpips", self.column);
        if self.reference_layout == ReferenceLayout::Columns {
            h.push_str(",reference_psnr,reference_ssim,reference_lpips");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            let s = &r.scores;
            out.push_str(&format!("{},{},{},{}", s.id, fmt6(s.psnr), fmt6(s.ssim), fmt6(s.lpips)));
            if self.reference_layout == ReferenceLayout::Columns {
                out.push_str(&reference_cells(r.reference));
            }
            out.push('\n');
        }
        out
    }

    pub fn reference_csv(&self) -> String {
        let mut out = format!("{},reference_psnr,reference_ssim,reference_lpips\n", self.column);
        for r in &self.rows {
            out.push_str(&r.scores.id);
            out.push_str(&reference_cells(r.reference));
            out.push('\n');
        }
        out
    }

    pub fn row(&self, key: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.scores.id == key)
    }

    /// Writes `<stem>.csv`, `<stem>_report.json` (rows, baseline, scored
    /// ids) and, for separate references, `<stem>_reference.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, body: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put(format!("{stem}.csv"), self.to_csv().as_bytes())?;
        if self.reference_layout == ReferenceLayout::SeparateFile {
            put(format!("{stem}_reference.csv"), self.reference_csv().as_bytes())?;
        }
        let mut json = serde_json::to_vec_pretty(self)?;
        writeln!(json).expect("write to memory");
        put(format!("{stem}_report.json"), &json)
    }
}

fn reference_cells(r: Option<Reference>) -> String {
    match r {
        Some(r) => format!(",{},{},{}", r.psnr, r.ssim, r.lpips),
        None => ",,,".into(),
    }
}

/// Test indices whose degraded image differs from its clean original,
/// capped at `limit`.
pub fn eval_indices(corpus: &[FundusSample], test: &[usize], limit: Option<usize>) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &i in test {
        let s = corpus.get(i).ok_or_else(|| invalid(format!("test index {i} out of range")))?;
        if s.image != s.clean {
            out.push(i);
        }
    }
    out.truncate(limit.unwrap_or(usize::MAX));
    if out.is_empty() {
        return Err(Error::Pipeline("the test split has no degraded images to score".into()));
    }
    Ok(out)
}

struct Bench<'a> {
    corpus: &'a [FundusSample],
    split: &'a DatasetSplit,
    eval: Vec<usize>,
    degraded: Vec<ImageTensor>,
    clean: Vec<ImageTensor>,
    net: PerceptualNet,
    sampling_seed: u64,
}

impl<'a> Bench<'a> {
    fn new(base: &RestorerConfig, corpus: &'a [FundusSample], split: &'a DatasetSplit, exp: &ExperimentConfig) -> Result<Self> {
        base.validate()?;
        exp.validate()?;
        let eval = eval_indices(corpus, &split.test, exp.eval_limit)?;
        let s = base.image_size;
        let degraded = eval.iter().map(|&i| fit(&corpus[i].image, s)).collect::<Result<_>>()?;
        let clean = eval.iter().map(|&i| fit(&corpus[i].clean, s)).collect::<Result<_>>()?;
        Ok(Bench {
            corpus,
            split,
            eval,
            degraded,
            clean,
            net: PerceptualNet::fixed_random(exp.perceptual_seed),
            sampling_seed: exp.sampling_seed,
        })
    }

    fn mean_scores(&self, id: &str, images: &[ImageTensor]) -> Result<MetricsRow> {
        let rows = images
            .iter()
            .zip(&self.clean)
            .map(|(im, c)| MetricsRow::compute(id, c, im, &self.net))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_row(id, &rows))
    }

    fn score(&self, key: &str, config: &RestorerConfig) -> Result<MetricsRow> {
        log::info!("training variant {key}");
        let restorer = train_restorer(config, self.corpus, &self.split.train)?;
        let refs: Vec<&ImageTensor> = self.degraded.iter().collect();
        let restored = restorer.run_chain(&refs, &mut ChaCha8Rng::seed_from_u64(self.sampling_seed))?;
        let row = self.mean_scores(key, &restored)?;
        log::info!("{key}: psnr {:.4} ssim {:.4} lpips {:.4}", row.psnr, row.ssim, row.lpips);
        Ok(row)
    }

    fn run(
        &self,
        column: &'static str,
        layout: ReferenceLayout,
        variants: Vec<(&str, RestorerConfig, Option<Reference>)>,
    ) -> Result<Comparison> {
        let rows = variants
            .into_iter()
            .map(|(key, cfg, reference)| {
                Ok(ComparisonRow {
                    scores: self.score(key, &cfg)?,
                    reference,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Comparison {
            column,
            rows,
            baseline: self.mean_scores("degraded", &self.degraded)?,
            eval_ids: self.eval.iter().map(|&i| self.corpus[i].id.clone()).collect(),
            reference_layout: layout,
        })
    }
}

/// One row per denoiser backbone.
pub fn compare_backbones(
    base: &RestorerConfig,
    corpus: &[FundusSample],
    split: &DatasetSplit,
    exp: &ExperimentConfig,
) -> Result<Comparison> {
    let bench = Bench::new(base, corpus, split, exp)?;
    let variants = Backbone::ALL
        .iter()
        .map(|&b| (b.key(), base.with_backbone(b), None))
        .collect();
    bench.run("backbone", ReferenceLayout::None, variants)
}

/// One row per compared feature extractor, labelled like
/// `self_attention+res34`.
pub fn compare_feature_extractors(
    base: &RestorerConfig,
    corpus: &[FundusSample],
    split: &DatasetSplit,
    exp: &ExperimentConfig,
) -> Result<Comparison> {
    let bench = Bench::new(base, corpus, split, exp)?;
    let labels: Vec<String> = ExtractorKind::COMPARED.iter().map(|k| k.label()).collect();
    let variants = ExtractorKind::COMPARED
        .iter()
        .zip(&labels)
        .zip(EXTRACTOR_REFERENCE)
        .map(|((&kind, label), r)| {
            let mut cfg = base.clone();
            cfg.extractor.kind = kind;
            (label.as_str(), cfg, r)
        })
        .collect();
    bench.run("extractor", ReferenceLayout::SeparateFile, variants)
}

/// One row per fusion strategy, with the reference scores as extra columns.
pub fn compare_fusion(
    base: &RestorerConfig,
    corpus: &[FundusSample],
    split: &DatasetSplit,
    exp: &ExperimentConfig,
) -> Result<Comparison> {
    let bench = Bench::new(base, corpus, split, exp)?;
    let variants = FusionStrategy::ALL
        .iter()
        .zip(FUSION_REFERENCE)
        .map(|(&s, r)| {
            let mut cfg = base.clone();
            cfg.fusion.strategy = s;
            (s.key(), cfg, r)
        })
        .collect();
    bench.run("strategy", ReferenceLayout::Columns, variants)
}
