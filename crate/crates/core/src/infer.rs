//! Word-level decisions from fragment scores, Top-k evaluation, and
//! activation heatmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    extract_fragments, fit_extent, gaussian_blur, padded_extent, resize_bilinear,
    resize_with_padding, to_tensor, word_to_batch, GrayImage,
};
use crate::model::{Ctx, Model};
use crate::synth::Item;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Coordinate-wise mean of the fragment score rows. Each coordinate is
/// summed in ascending order, so the result does not depend on the order
/// of the fragments.
pub fn aggregate(rows: &[Vec<f32>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot aggregate an empty score list".into()))?;
    let k = first.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument("score rows differ in length".into()));
    }
    let mut out = Vec::with_capacity(k);
    let mut column = Vec::with_capacity(rows.len());
    for j in 0..k {
        column.clear();
        column.extend(rows.iter().map(|r| r[j]));
        column.sort_by(f32::total_cmp);
        out.push(column.iter().map(|&v| v as f64).sum::<f64>() / rows.len() as f64);
    }
    Ok(out)
}

/// [`aggregate`] over the rows of an `[N, K]` tensor.
pub fn aggregate_tensor(scores: &Tensor) -> Result<Vec<f64>> {
    let k = scores.last_dim();
    let rows: Vec<Vec<f32>> = scores
        .data()
        .chunks(k.max(1))
        .map(<[f32]>::to_vec)
        .collect();
    aggregate(&rows)
}

/// Index of the largest entry; ties go to the lowest index. An empty
/// vector yields 0.
pub fn identify<T: PartialOrd + Copy>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// 0-based position of `target` in the ranking that [`identify`] heads:
/// entries larger than the target's, plus equal entries at lower indices.
pub fn rank_of<T: PartialOrd + Copy>(p: &[T], target: usize) -> usize {
    let t = p[target];
    p.iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordOutcome {
    pub path: String,
    pub label: usize,
    pub predicted: usize,
    /// 0-based rank of the true writer.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_writers: usize,
    pub words: usize,
    /// Percentages.
    pub top1: f64,
    pub top5: f64,
    /// `confusion[true][predicted]` word counts.
    pub confusion: Vec<Vec<usize>>,
    pub outcomes: Vec<WordOutcome>,
}

impl EvalReport {
    pub fn from_outcomes(num_writers: usize, outcomes: Vec<WordOutcome>) -> Self {
        let mut confusion = vec![vec![0; num_writers]; num_writers];
        for o in &outcomes {
            confusion[o.label][o.predicted] += 1;
        }
        let mut r = Self {
            num_writers,
            words: outcomes.len(),
            top1: 0.0,
            top5: 0.0,
            confusion,
            outcomes,
        };
        r.top1 = r.top_k(1);
        r.top5 = r.top_k(5);
        r
    }

    /// Percentage of words whose writer is among the `k` best scores.
    pub fn top_k(&self, k: usize) -> f64 {
        if self.words == 0 {
            return 0.0;
        }
        let hits = self.outcomes.iter().filter(|o| o.rank < k).count();
        100.0 * hits as f64 / self.words as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with one row per labelled line.
    pub fn table(rows: &[(String, &EvalReport)]) -> String {
        let width = rows
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(0)
            .max("Method".len());
        let mut out = format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}\n",
            "Method", "Top 1", "Top 5", "Words"
        );
        out.push_str(&format!("{}\n", "-".repeat(width + 26)));
        for (name, r) in rows {
            out.push_str(&format!(
                "{name:<width$}  {:>6.2}  {:>6.2}  {:>6}\n",
                r.top1, r.top5, r.words
            ));
        }
        out
    }
}

/// Fragment score vectors `[P², K]` of one word image.
pub fn word_scores(model: &Model, word: &GrayImage) -> Result<Tensor> {
    let batch = word_to_batch(word, model.config.grid, model.config.fragment_side)?;
    model.scores(&batch)
}

/// Largest number of fragments pushed through the network at once.
const EVAL_BATCH: usize = 36;

/// Top-1/Top-5 evaluation of `items` (words with known writers).
pub fn evaluate<'a>(
    model: &Model,
    items: impl IntoIterator<Item = &'a Item>,
) -> Result<EvalReport> {
    let cfg = &model.config;
    let per_word = cfg.grid * cfg.grid;
    let words_per_batch = (EVAL_BATCH / per_word).max(1);
    let items: Vec<&Item> = items.into_iter().collect();
    let mut outcomes = Vec::with_capacity(items.len());
    for chunk in items.chunks(words_per_batch) {
        let batches = chunk
            .iter()
            .map(|it| word_to_batch(&it.image, cfg.grid, cfg.fragment_side))
            .collect::<Result<Vec<_>>>()?;
        let scores = model.scores(&concat_batches(&batches)?)?;
        let k = scores.last_dim();
        for (i, it) in chunk.iter().enumerate() {
            let rows = &scores.data()[i * per_word * k..(i + 1) * per_word * k];
            let rows: Vec<Vec<f32>> = rows.chunks(k).map(<[f32]>::to_vec).collect();
            let p = aggregate(&rows)?;
            outcomes.push(WordOutcome {
                path: it.path.clone(),
                label: it.label,
                predicted: identify(&p),
                rank: rank_of(&p, it.label),
            });
        }
    }
    Ok(EvalReport::from_outcomes(cfg.num_writers, outcomes))
}

/// Joins `[n_i, ...]` tensors along the batch axis.
pub fn concat_batches(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("no batches to join".into()))?;
    let inner = &first.shape()[1..];
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
    let mut n = 0;
    for p in parts {
        if &p.shape()[1..] != inner {
            return Err(Error::shape("concat_batches", "sample shapes differ"));
        }
        n += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(inner);
    Tensor::new(&shape, data)
}

/// Heatmap smoothing: `σ = fragment_side / 20` unless overridden.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeatmapOptions {
    pub sigma: Option<f32>,
}

/// Turns raw activations over the padded word (`w×h`) into an 8-bit heat
/// image: min-max stretch to [0, 255], Gaussian smoothing, crop to
/// `crop_w×crop_h`, and a final stretch so the cropped result spans
/// [0, 255]. A constant field maps to all zeros.
pub fn postprocess_heat(
    raw: &[f32],
    w: usize,
    h: usize,
    sigma: f32,
    crop_w: usize,
    crop_h: usize,
) -> Result<GrayImage> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap activations"));
    }
    let stretched = stretch(raw);
    let smooth = gaussian_blur(&stretched, w, h, sigma);
    let mut cropped = Vec::with_capacity(crop_w * crop_h);
    for y in 0..crop_h {
        cropped.extend_from_slice(&smooth[y * w..y * w + crop_w]);
    }
    let pixels = stretch(&cropped).iter().map(|&v| v.round() as u8).collect();
    GrayImage::new(crop_w, crop_h, pixels)
}

fn stretch(v: &[f32]) -> Vec<f32> {
    let (lo, hi) = v
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (x - lo) / (hi - lo) * 255.0).collect()
}

/// Activation heatmap of a word, same size as the word image.
///
/// Each fragment's final feature map (after fusion and attention, before
/// pooling) is averaged over channels, upsampled to the network input,
/// cut back to the fragment's content region and resized to the fragment.
/// The tiles are reassembled at their grid positions and post-processed
/// by [`postprocess_heat`].
pub fn heatmap(model: &Model, word: &GrayImage, opts: HeatmapOptions) -> Result<GrayImage> {
    let cfg = &model.config;
    let (p, side) = (cfg.grid, cfg.fragment_side);
    let frags = extract_fragments(word, p)?;
    let (pw, ph) = (
        padded_extent(word.width(), p),
        padded_extent(word.height(), p),
    );
    let mut raw = vec![0f32; pw * ph];
    for f in &frags {
        let (fw, fh) = (f.image.width(), f.image.height());
        let input = to_tensor(&resize_with_padding(&f.image, side)?);
        let mut tape = Tape::inference();
        let x = tape.constant(input);
        let (features, _) = model.features(&mut tape, x, &mut Ctx::infer())?;
        let map = tape.value(features);
        let [_, h, w, c] = [
            map.shape()[0],
            map.shape()[1],
            map.shape()[2],
            map.shape()[3],
        ];
        let act: Vec<f32> = map
            .data()
            .chunks(c)
            .map(|px| px.iter().sum::<f32>() / c as f32)
            .collect();
        let full = resize_bilinear(&act, w, h, side, side);
        let (nw, nh) = fit_extent(fw, fh, side);
        let (ox, oy) = ((side - nw) / 2, (side - nh) / 2);
        let mut content = Vec::with_capacity(nw * nh);
        for y in oy..oy + nh {
            content.extend_from_slice(&full[y * side + ox..y * side + ox + nw]);
        }
        let tile = resize_bilinear(&content, nw, nh, fw, fh);
        for y in 0..fh {
            let row = (f.grid_row * fh + y) * pw + f.grid_col * fw;
            raw[row..row + fw].copy_from_slice(&tile[y * fw..(y + 1) * fw]);
        }
    }
    let sigma = opts.sigma.unwrap_or(side as f32 / 20.0);
    postprocess_heat(&raw, pw, ph, sigma, word.width(), word.height())
}

/// Blue → cyan → yellow → red ramp for an 8-bit heat value.
pub fn color_ramp(v: u8) -> [u8; 3] {
    const STOPS: [[f32; 3]; 4] = [
        [0.0, 0.0, 160.0],
        [0.0, 200.0, 255.0],
        [255.0, 230.0, 0.0],
        [220.0, 0.0, 0.0],
    ];
    let t = v as f32 / 255.0 * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f32;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * f).round() as u8)
}

/// Half-and-half blend of the colored heat over the grayscale word,
/// packed as RGB rows.
pub fn overlay_rgb(word: &GrayImage, heat: &GrayImage) -> Result<Vec<u8>> {
    if word.width() != heat.width() || word.height() != heat.height() {
        return Err(Error::InvalidArgument("heat and word sizes differ".into()));
    }
    let mut out = Vec::with_capacity(word.pixels().len() * 3);
    for (&g, &hv) in word.pixels().iter().zip(heat.pixels()) {
        for c in color_ramp(hv) {
            out.push(((g as u16 + c as u16) / 2) as u8);
        }
    }
    Ok(out)
}
