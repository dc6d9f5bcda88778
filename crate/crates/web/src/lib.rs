//! Browser bindings: parameter counts, the widest-block schedule and a
//! synthetic sample preview. Every export returns JSON text.

use lunet::data::{generate, ContextMode, SynthSpec};
use lunet::pruning::widest_schedule;
use lunet::unet::{make_spec, ArchSpec, Family, SpecParams};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn spec(
    family: &str,
    n_f: usize,
    levels: usize,
    convs: usize,
    dim: usize,
    norm: bool,
) -> Result<ArchSpec, JsError> {
    let family: Family = family.parse().map_err(js_err)?;
    make_spec(&SpecParams {
        family,
        n_f,
        levels,
        convs_per_block: convs,
        dim,
        norm,
        scale_percent: (family == Family::Scaled).then_some(50.0),
        ..SpecParams::default()
    })
    .map_err(js_err)
}

#[derive(Serialize)]
struct CountView {
    n_params: usize,
    n_channels: usize,
    /// Summed conv widths per block, encoder first.
    block_channels: Vec<usize>,
    kinds: Vec<&'static str>,
}

/// Parameter and channel counts of one architecture.
#[wasm_bindgen]
pub fn count(
    family: &str,
    n_f: usize,
    levels: usize,
    convs: usize,
    dim: usize,
    norm: bool,
) -> Result<String, JsError> {
    let s = spec(family, n_f, levels, convs, dim, norm)?;
    let c = s.count();
    let view = CountView {
        n_params: c.n_params,
        n_channels: c.n_channels,
        block_channels: s.block_channels(),
        kinds: (0..s.num_blocks())
            .map(|b| s.block_kind(b).as_str())
            .collect(),
    };
    serde_json::to_string(&view).map_err(js_err)
}

#[derive(Serialize)]
struct ScheduleView {
    n_params: Vec<usize>,
    /// Per step, per block summed widths.
    blocks: Vec<Vec<usize>>,
    kinds: Vec<&'static str>,
}

/// The full widest-block schedule of an architecture, one row per step.
#[wasm_bindgen]
pub fn schedule(
    family: &str,
    n_f: usize,
    levels: usize,
    convs: usize,
    dim: usize,
    norm: bool,
) -> Result<String, JsError> {
    let s = spec(family, n_f, levels, convs, dim, norm)?;
    let total = s.count().n_channels - s.num_convs();
    let table = widest_schedule(&s, total).map_err(js_err)?;
    let view = ScheduleView {
        n_params: table
            .iter()
            .map(|w| {
                ArchSpec {
                    widths: w.clone(),
                    ..s.clone()
                }
                .count()
                .n_params
            })
            .collect(),
        blocks: table
            .iter()
            .map(|w| w.iter().map(|b| b.iter().sum()).collect())
            .collect(),
        kinds: (0..s.num_blocks())
            .map(|b| s.block_kind(b).as_str())
            .collect(),
    };
    serde_json::to_string(&view).map_err(js_err)
}

#[derive(Serialize)]
struct SampleView {
    side: usize,
    image: Vec<f64>,
    labels: Vec<u8>,
}

/// One 2-D training sample of the synthetic dataset.
#[wasm_bindgen]
pub fn sample(
    side: usize,
    seed: u64,
    mode: &str,
    num_labels: usize,
    index: usize,
) -> Result<String, JsError> {
    let context_mode: ContextMode = mode.parse().map_err(js_err)?;
    let ds = generate(&SynthSpec {
        dim: 2,
        side,
        num_labels,
        n_train: index + 1,
        n_test: 1,
        seed,
        context_mode,
    })
    .map_err(js_err)?;
    let s = &ds.train[index];
    serde_json::to_string(&SampleView {
        side,
        image: s.image.data().to_vec(),
        labels: s.labels.clone(),
    })
    .map_err(js_err)
}
