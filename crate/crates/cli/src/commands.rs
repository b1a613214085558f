//! The four subcommands: prune (score + search, write a ranking), extract
//! (cut one sub-network from a ranking), eval (metrics for a checkpoint or a
//! sparsity sweep), and flops (theoretical compute report).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use snapvit_core::analytics::{flops, flops_from_weights, knn_eval, FlopsReport};
use snapvit_core::artifact::{read_checkpoint, read_ranking, write_checkpoint, write_ranking};
use snapvit_core::correction::correct_model;
use snapvit_core::data::LabeledImages;
use snapvit_core::fitness::{fit_pca, FitnessContext};
use snapvit_core::pruner::{
    extract_mask, run_snapvit_with_progress, PruneBasis, SparsityRequest, StructureRanking,
};
use snapvit_core::vit::{compact, forward::forward, ModelWeights, PruneMask};
use snapvit_core::{Result, SnapError, Tensor};

use crate::config::RunConfig;

/// Correction update block width (columns per block).
const CORRECTION_BLOCK: usize = 128;

fn flops_json(report: &FlopsReport) -> Value {
    json!({
        "total": report.total,
        "gflops": report.gflops(),
        "embeddings": report.embeddings,
        "attention": report.attention.iter().map(|a| a.total()).collect::<Vec<u64>>(),
        "ffn": report.ffn,
        "logits": report.logits,
    })
}

fn emit(metrics: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(metrics)
        .map_err(|e| SnapError::Format(e.to_string()))?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text + "\n")?;
    }
    Ok(())
}

/// Run scoring and search per the config; write the ranking artifact.
pub fn cmd_prune(config: &RunConfig, out_flag: Option<&Path>) -> Result<PathBuf> {
    let weights = config.model.load()?;
    let data = config.dataset.load()?;
    let labels = if config.loss_kind == snapvit_core::curvature::LossKind::CrossEntropy {
        Some(data.labels.as_slice())
    } else {
        None
    };
    let sc = config.search_config();
    let total = sc.iterations;
    let ranking = run_snapvit_with_progress(&weights, &data.images, labels, &sc, |i, best| {
        println!("iter {}/{total} best fitness {best:.6}", i + 1);
        let _ = std::io::stdout().flush();
    })?;
    let out = out_flag
        .map(Path::to_path_buf)
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("ranking.snaprank"));
    let mut effective = config.clone();
    effective.out = Some(out.clone());
    write_ranking(&out, &ranking, &effective.to_value()?)?;
    let p = &ranking.provenance;
    match p.best_fitness {
        Some(best) => println!(
            "wrote ranking of {} structures ({} units) to {} — {} iterations, best fitness {best:.6}",
            ranking.order.len(),
            ranking.c.len(),
            out.display(),
            p.iterations,
        ),
        None => println!(
            "wrote local-only ranking of {} structures to {}",
            ranking.order.len(),
            out.display(),
        ),
    }
    Ok(out)
}

fn load_ranking(path: &Path) -> Result<(StructureRanking, RunConfig)> {
    let (ranking, embedded) = read_ranking(path)?;
    let config = RunConfig::from_value(&embedded)?;
    Ok((ranking, config))
}

/// Cut one sub-network at `sparsity` from a ranking artifact, optionally
/// correcting surviving weights on calibration data, and write a compacted
/// checkpoint.
pub fn cmd_extract(
    ranking_path: &Path,
    sparsity: f64,
    basis: Option<PruneBasis>,
    correct: bool,
    samples: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (ranking, config) = load_ranking(ranking_path)?;
    let weights = config.model.load()?;
    let basis = basis.unwrap_or(config.search_basis);
    let caps = ranking.provenance.caps;
    let (mask, achieved) = extract_mask(
        &ranking,
        SparsityRequest { target: sparsity, basis },
        &weights.config,
        &caps,
    )?;
    let full = if correct {
        let n_calib = samples.unwrap_or(config.n_calib);
        let data = config.dataset.load()?;
        if data.len() < n_calib {
            return Err(SnapError::Data(format!(
                "dataset has {} samples, correction wants {n_calib}",
                data.len()
            )));
        }
        let calib = data.image_slice(0, n_calib)?;
        let (corrected, stats) = correct_model(&weights, &mask, &calib, CORRECTION_BLOCK)?;
        for s in &stats {
            println!(
                "corrected layer {} {:?}: reconstruction error {:.6} (naive {:.6})",
                s.layer, s.kind, s.err_corrected, s.err_naive
            );
        }
        corrected
    } else {
        weights.clone()
    };
    let small = compact(&full, &mask)?;
    write_checkpoint(out, &small)?;
    let before = flops(&weights.config, None)?;
    let after = flops(&weights.config, Some(&mask))?;
    println!(
        "requested {basis} sparsity {sparsity:.4}, achieved {achieved:.4}; \
         parameters {} -> {}; GFLOPs {:.3} -> {:.3}; wrote {}",
        weights.n_params(),
        small.n_params(),
        before.gflops(),
        after.gflops(),
        out.display()
    );
    Ok(())
}

fn embeddings(w: &ModelWeights, images: &Tensor) -> Result<Tensor> {
    forward(w, &PruneMask::all_keep_for(w), images)
}

/// Post-PCA mean cosine of `candidate`'s embeddings against the reference
/// model's, with the PCA basis fitted on the reference only.
fn model_fitness(
    reference: &ModelWeights,
    candidate: &ModelWeights,
    images: &Tensor,
    pca_k: usize,
) -> Result<f64> {
    let ref_emb = embeddings(reference, images)?;
    let basis = fit_pca(&ref_emb, pca_k)?;
    let a = basis.project(&ref_emb)?;
    let b = basis.project(&embeddings(candidate, images)?)?;
    snapvit_core::fitness::mean_cosine(&a, &b)
}

/// Deterministic train/test split for k-NN: first 80% train, rest test.
fn knn_split(n: usize) -> Result<usize> {
    let n_train = (n * 4) / 5;
    if n_train == 0 || n_train == n {
        return Err(SnapError::Data(format!("{n} samples cannot be split for k-NN evaluation")));
    }
    Ok(n_train)
}

fn knn_accuracy(w: &ModelWeights, data: &LabeledImages, k: usize) -> Result<f64> {
    let n = data.len();
    let n_train = knn_split(n)?;
    let train = embeddings(w, &data.image_slice(0, n_train)?)?;
    let test = embeddings(w, &data.image_slice(n_train, n - n_train)?)?;
    knn_eval(&train, &data.labels[..n_train], &test, &data.labels[n_train..], k)
}

#[derive(Debug, Clone, Copy)]
pub enum EvalMode {
    Knn,
    Fitness,
}

impl std::str::FromStr for EvalMode {
    type Err = SnapError;

    fn from_str(s: &str) -> Result<EvalMode> {
        match s {
            "knn" => Ok(EvalMode::Knn),
            "fitness" => Ok(EvalMode::Fitness),
            other => Err(SnapError::Config(format!("unknown eval mode {other:?}"))),
        }
    }
}

/// Metrics for one checkpoint against the run config's reference model and
/// dataset. With no checkpoint argument the reference evaluates itself
/// (fitness 1 by construction).
pub fn cmd_eval(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    mode: &EvalMode,
    samples: Option<usize>,
    pca_k: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let reference = config.model.load()?;
    let candidate = match checkpoint {
        Some(path) => read_checkpoint(path)?,
        None => reference.clone(),
    };
    let data = config.dataset.load()?;
    let n = samples.unwrap_or(config.n_samples_fitness).min(data.len());
    if n == 0 {
        return Err(SnapError::Data("no evaluation samples".into()));
    }
    let subset = LabeledImages {
        images: data.image_slice(0, n)?,
        labels: data.labels[..n].to_vec(),
    };
    let report = flops_from_weights(&candidate)?;
    let metrics = match mode {
        EvalMode::Fitness => {
            let f = model_fitness(
                &reference,
                &candidate,
                &subset.images,
                pca_k.unwrap_or(config.pca_k),
            )?;
            json!({"mode": "fitness", "fitness": f, "n_samples": n, "flops": flops_json(&report)})
        }
        EvalMode::Knn => {
            let acc = knn_accuracy(&candidate, &subset, config.knn_k)?;
            json!({
                "mode": "knn",
                "accuracy": acc,
                "k": config.knn_k,
                "n_samples": n,
                "flops": flops_json(&report),
            })
        }
    };
    emit(&metrics, out)
}

/// Sweep a ranking over a sparsity grid: one CSV row per target with masked
/// fitness, masked k-NN accuracy, and theoretical GFLOPs.
pub fn cmd_eval_sweep(
    config: &RunConfig,
    ranking_path: &Path,
    grid: Option<&[f64]>,
    basis: Option<PruneBasis>,
    samples: Option<usize>,
    pca_k: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let (ranking, embedded_config) = load_ranking(ranking_path)?;
    let reference = config.model.load()?;
    let data = config.dataset.load()?;
    let n = samples.unwrap_or(config.n_samples_fitness).min(data.len());
    let n_train = knn_split(n)?;
    let subset =
        LabeledImages { images: data.image_slice(0, n)?, labels: data.labels[..n].to_vec() };
    let basis = basis.unwrap_or(embedded_config.search_basis);
    let grid = grid.unwrap_or(&config.grid);
    let ctx = FitnessContext::new(&reference, &subset.images, pca_k.unwrap_or(config.pca_k))?;
    let train_labels = &subset.labels[..n_train];
    let test_labels = &subset.labels[n_train..];
    let mut csv = String::from("sparsity,fitness,knn_acc,gflops\n");
    for &s in grid {
        let (mask, _) = extract_mask(
            &ranking,
            SparsityRequest { target: s, basis },
            &reference.config,
            &ranking.provenance.caps,
        )?;
        let fit = ctx.mask_fitness(&mask)?;
        let train = forward(&reference, &mask, &subset.image_slice(0, n_train)?)?;
        let test = forward(&reference, &mask, &subset.image_slice(n_train, n - n_train)?)?;
        let acc = knn_eval(&train, train_labels, &test, test_labels, config.knn_k)?;
        let gf = flops(&reference.config, Some(&mask))?.gflops();
        csv += &format!("{s},{fit},{acc},{gf}\n");
    }
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, csv)?;
    }
    Ok(())
}

/// Theoretical FLOPs for a preset name, a run config's model, or a
/// checkpoint file.
pub fn cmd_flops(
    preset: Option<&str>,
    config: Option<&RunConfig>,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let report = if let Some(path) = checkpoint {
        flops_from_weights(&read_checkpoint(path)?)?
    } else if let Some(cfg) = config {
        flops_from_weights(&cfg.model.load()?)?
    } else if let Some(name) = preset {
        let model_config = match name {
            "toy" => snapvit_core::vit::ViTConfig::toy(),
            "vit-s16" => snapvit_core::vit::ViTConfig::vit_s16(),
            "vit-b16" => snapvit_core::vit::ViTConfig::vit_b16(),
            "vit-l16" => snapvit_core::vit::ViTConfig::vit_l16(),
            other => {
                return Err(SnapError::Config(format!(
                    "unknown model preset {other:?} (have toy, vit-s16, vit-b16, vit-l16)"
                )))
            }
        };
        flops(&model_config, None)?
    } else {
        return Err(SnapError::Config(
            "flops needs a model preset, --config, or --checkpoint".into(),
        ));
    };
    emit(&flops_json(&report), out)
}
