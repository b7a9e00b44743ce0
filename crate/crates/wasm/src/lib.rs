//! A word-image playground for the browser. [`Playground`] holds a model
//! and the current word; the exported `Demo` wraps it for JavaScript.

use wasm_bindgen::prelude::*;

use wrid::image::{decode_image, padded_extent, GrayImage};
use wrid::infer::{aggregate_tensor, heatmap, identify, overlay_rgb, word_scores, HeatmapOptions};
use wrid::synth::{gen_writer_style, render_word};
use wrid::{checkpoint, Error, Model, ModelConfig, Result, Rng};

/// Writers scored by the built-in model.
pub const DEMO_WRITERS: usize = 5;

/// The built-in model: the full architecture at 1/16 of the channels,
/// randomly initialized. Load a trained checkpoint for real predictions.
pub fn demo_config() -> ModelConfig {
    ModelConfig {
        num_writers: DEMO_WRITERS,
        channel_scale: 16,
        ..ModelConfig::default()
    }
}

/// One axis-aligned fragment cell, clipped to the word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

pub struct Playground {
    pub model: Model,
    pub word: Option<GrayImage>,
}

impl Playground {
    pub fn new(seed: u64) -> Result<Self> {
        Ok(Self {
            model: Model::new(demo_config(), seed)?,
            word: None,
        })
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let model = checkpoint::decode(bytes)?;
        if model.config.role != demo_config().role {
            return Err(Error::InvalidArgument(
                "checkpoint is not a writer classifier".into(),
            ));
        }
        self.model = model;
        Ok(())
    }

    /// Draws `text` in the hand of synthetic writer `writer` of corpus
    /// `corpus_seed`; `seed` varies the glyph jitter.
    pub fn render(
        &mut self,
        text: &str,
        corpus_seed: u64,
        writer: usize,
        seed: u64,
    ) -> Result<&GrayImage> {
        let style = gen_writer_style(corpus_seed, writer);
        let img = render_word(&style, text, &mut Rng::new(seed))?;
        Ok(self.word.insert(img))
    }

    /// Decodes a PGM (or PNG, when built with it) as the current word.
    pub fn load_word(&mut self, bytes: &[u8]) -> Result<&GrayImage> {
        Ok(self.word.insert(decode_image(bytes)?))
    }

    fn current(&self) -> Result<&GrayImage> {
        self.word
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no word loaded".into()))
    }

    /// The fragment grid in row-major order. Cells lying wholly in the
    /// white padding are skipped.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let word = self.current()?;
        let p = self.model.config.grid;
        let (w, h) = (word.width(), word.height());
        let (fw, fh) = (padded_extent(w, p) / p, padded_extent(h, p) / p);
        let mut out = Vec::with_capacity(p * p);
        for r in 0..p {
            for c in 0..p {
                let (x, y) = (c * fw, r * fh);
                if x < w && y < h {
                    out.push(Cell {
                        x,
                        y,
                        w: fw.min(w - x),
                        h: fh.min(h - y),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Per-fragment writer probabilities (row-major) and their mean.
    pub fn scores(&self) -> Result<(Vec<Vec<f32>>, Vec<f64>)> {
        let s = word_scores(&self.model, self.current()?)?;
        let k = s.last_dim();
        let rows = s.data().chunks(k).map(<[f32]>::to_vec).collect();
        Ok((rows, aggregate_tensor(&s)?))
    }

    /// Heatmap blended over the word as RGB.
    pub fn heat_overlay(&self, sigma: Option<f32>) -> Result<Vec<u8>> {
        let word = self.current()?;
        let heat = heatmap(&self.model, word, HeatmapOptions { sigma })?;
        overlay_rgb(word, &heat)
    }
}

pub fn gray_to_rgba(img: &GrayImage) -> Vec<u8> {
    img.pixels().iter().flat_map(|&g| [g, g, g, 255]).collect()
}

pub fn rgb_to_rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3)
        .flat_map(|c| [c[0], c[1], c[2], 255])
        .collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Playground,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> std::result::Result<Demo, JsError> {
        Ok(Demo {
            inner: Playground::new(seed).map_err(js)?,
        })
    }

    #[wasm_bindgen(js_name = loadCheckpoint)]
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> std::result::Result<(), JsError> {
        self.inner.load_checkpoint(bytes).map_err(js)
    }

    #[wasm_bindgen(js_name = numWriters)]
    pub fn num_writers(&self) -> usize {
        self.inner.model.config.num_writers
    }

    /// Renders a word and returns its RGBA pixels.
    pub fn render(
        &mut self,
        text: &str,
        corpus_seed: u64,
        writer: usize,
        seed: u64,
    ) -> std::result::Result<Vec<u8>, JsError> {
        self.inner
            .render(text, corpus_seed, writer, seed)
            .map(gray_to_rgba)
            .map_err(js)
    }

    #[wasm_bindgen(js_name = loadWord)]
    pub fn load_word(&mut self, bytes: &[u8]) -> std::result::Result<Vec<u8>, JsError> {
        self.inner.load_word(bytes).map(gray_to_rgba).map_err(js)
    }

    pub fn width(&self) -> usize {
        self.inner.word.as_ref().map_or(0, GrayImage::width)
    }

    pub fn height(&self) -> usize {
        self.inner.word.as_ref().map_or(0, GrayImage::height)
    }

    /// Fragment cells as flat `[x, y, w, h, ...]`.
    pub fn cells(&self) -> std::result::Result<Vec<u32>, JsError> {
        let cells = self.inner.cells().map_err(js)?;
        Ok(cells
            .iter()
            .flat_map(|c| [c.x, c.y, c.w, c.h].map(|v| v as u32))
            .collect())
    }

    /// Word-level probabilities followed by the per-fragment rows, flat.
    pub fn identify(&self) -> std::result::Result<Vec<f64>, JsError> {
        let (rows, mean) = self.inner.scores().map_err(js)?;
        Ok(mean
            .into_iter()
            .chain(rows.into_iter().flatten().map(f64::from))
            .collect())
    }

    #[wasm_bindgen(js_name = predicted)]
    pub fn predicted(&self) -> std::result::Result<usize, JsError> {
        let (_, mean) = self.inner.scores().map_err(js)?;
        Ok(identify(&mean))
    }

    /// RGBA heatmap overlay; a negative `sigma` picks the default.
    pub fn heatmap(&self, sigma: f32) -> std::result::Result<Vec<u8>, JsError> {
        let sigma = (sigma >= 0.0).then_some(sigma);
        self.inner
            .heat_overlay(sigma)
            .map(|rgb| rgb_to_rgba(&rgb))
            .map_err(js)
    }
}
