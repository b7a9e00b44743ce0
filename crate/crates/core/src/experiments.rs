//! The fusion/attention ablation grid.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::infer::{evaluate, EvalReport};
use crate::model::{AttentionPlacement, FreezeMask, Fusion, Model, ModelConfig, StreamMode};
use crate::params::ParamStore;
use crate::synth::{Split, WriterDataset};
use crate::train::{train, EpochMetrics, TrainConfig};

/// One grid cell. `fusion` is `None` for the single-stream baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub mode: StreamMode,
    pub fusion: Option<Fusion>,
    pub attention: AttentionPlacement,
}

impl Variant {
    pub fn label(&self) -> String {
        format!(
            "{} / {} / {}",
            self.mode,
            self.fusion.map_or("-", Fusion::as_str),
            self.attention
        )
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            fusion: self.fusion.unwrap_or(base.fusion),
            attention_placement: self.attention,
            ..base.clone()
        }
    }
}

/// `{wd_only, dual} × {max, add, concat} × {none, per_stream, post_fusion}`
/// without the incoherent cells: a single stream has nothing to fuse and
/// no per-stream placement, leaving 2 + 9 variants.
pub fn ablation_grid() -> Vec<Variant> {
    let mut out = vec![];
    for attention in [AttentionPlacement::None, AttentionPlacement::PostFusion] {
        out.push(Variant {
            mode: StreamMode::WdOnly,
            fusion: None,
            attention,
        });
    }
    for fusion in Fusion::ALL {
        for attention in AttentionPlacement::ALL {
            out.push(Variant {
                mode: StreamMode::Dual,
                fusion: Some(*fusion),
                attention: *attention,
            });
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub history: Vec<EpochMetrics>,
}

/// Trains and tests each of `variants` on `dataset`. Dual variants start their
/// writer-independent stream from `wi_source` with the default freeze.
/// Each cell keeps the weights of its best validation epoch (the last
/// epoch without validation words) for testing.
pub fn run_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    dataset: &WriterDataset,
    wi_source: &ParamStore,
    variants: &[Variant],
    mut progress: impl FnMut(&Variant, &EpochMetrics),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut model = Model::new(variant.apply(base), seed)?;
        if variant.mode == StreamMode::Dual {
            model.load_prefix(wi_source, "wi")?;
            model.apply_freeze(&FreezeMask::default_for(StreamMode::Dual))?;
        }
        let mut best: Option<(f64, ParamStore)> = None;
        let history = train(&mut model, dataset, train_cfg, |m, model| {
            progress(&variant, m);
            let score = m.val_top1.unwrap_or(f64::INFINITY);
            if best
                .as_ref()
                .is_none_or(|(b, _)| score > *b || score.is_infinite())
            {
                best = Some((score, model.store.clone()));
            }
            ControlFlow::Continue(())
        })?;
        if let Some((_, store)) = best {
            model.store = store;
        }
        let report = evaluate(&model, dataset.split(Split::Test))?;
        rows.push(AblationRow {
            variant,
            report,
            history,
        });
    }
    Ok(rows)
}

/// Mode, fusion and attention columns followed by Top-1/Top-5.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<8}  {:<7}  {:<12}  {:>6}  {:>6}\n",
        "Streams", "Fusion", "Attention", "Top 1", "Top 5"
    );
    out.push_str(&format!("{}\n", "-".repeat(47)));
    for r in rows {
        let v = &r.variant;
        out.push_str(&format!(
            "{:<8}  {:<7}  {:<12}  {:>6.2}  {:>6.2}\n",
            v.mode.as_str(),
            v.fusion.map_or("-", Fusion::as_str),
            v.attention.as_str(),
            r.report.top1,
            r.report.top5
        ));
    }
    out
}

/// A qualitative comparison between grid rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub claim: String,
    pub holds: bool,
    pub detail: String,
}

fn mean_top1(rows: &[AblationRow], keep: impl Fn(&Variant) -> bool) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| keep(&r.variant))
        .map(|r| r.report.top1)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// The expected orderings, each judged on mean Top-1 over the rows it
/// concerns: dual ≥ wd_only, concat ≥ add ≥ max, attention ≥ none.
pub fn orderings(rows: &[AblationRow]) -> Vec<Ordering> {
    let dual = |f: Option<Fusion>| {
        move |v: &Variant| v.mode == StreamMode::Dual && (f.is_none() || v.fusion == f)
    };
    let mut out = Vec::new();
    let mut push = |claim: &str, pairs: &[(&str, Option<f64>)]| {
        let vals: Vec<f64> = pairs.iter().filter_map(|(_, v)| *v).collect();
        if vals.len() != pairs.len() {
            return;
        }
        let holds = vals.windows(2).all(|w| w[0] >= w[1]);
        let detail = pairs
            .iter()
            .map(|(n, v)| format!("{n} {:.2}", v.unwrap_or(f64::NAN)))
            .collect::<Vec<_>>()
            .join(" vs ");
        out.push(Ordering {
            claim: claim.to_string(),
            holds,
            detail,
        });
    };
    push(
        "dual >= wd_only",
        &[
            ("dual", mean_top1(rows, dual(None))),
            ("wd_only", mean_top1(rows, |v| v.mode == StreamMode::WdOnly)),
        ],
    );
    push(
        "concat >= add >= max",
        &[
            ("concat", mean_top1(rows, dual(Some(Fusion::Concat)))),
            ("add", mean_top1(rows, dual(Some(Fusion::Add)))),
            ("max", mean_top1(rows, dual(Some(Fusion::Max)))),
        ],
    );
    push(
        "attention >= none",
        &[
            (
                "attention",
                mean_top1(rows, |v| v.attention != AttentionPlacement::None),
            ),
            (
                "none",
                mean_top1(rows, |v| v.attention == AttentionPlacement::None),
            ),
        ],
    );
    out
}
