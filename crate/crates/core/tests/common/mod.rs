// Independent oracles and the desk-scale regime shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;
use std::sync::OnceLock;

use lunet::data::{generate, ContextMode, Dataset, SynthSpec};
use lunet::numerics::{Graph, LossKind, Tensor};
use lunet::pruning::{stamp_loop, PruneLog, StampConfig, Strategy};
use lunet::training::TrainConfig;
use lunet::unet::{
    build, make_spec, ArchSpec, BlockKind, ChannelId, ConvRef, Family, SpecParams, UnetModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 3] = [1, 2, 3];
pub const DESK_SIDE: usize = 32;
pub const DESK_TRAIN: usize = 48;
pub const DESK_TEST: usize = 16;
pub const DESK_EPOCHS: usize = 30;
/// Pruning runs stop here; every matched window (25% ± 2.5%) is covered.
pub const PRUNE_STOP: f64 = 0.22;

// Written to the stdout handle, not println!, so the line survives the
// harness's output capture and shows up in a plain `cargo test` log.
pub fn line(n: usize, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {n:>2}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = out.flush();
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Sum of the sizes of every tensor the builder allocates.
pub fn brute_count(spec: &ArchSpec) -> usize {
    let m = build(spec, 0).unwrap();
    m.parameters().iter().map(|t| t.data().len()).sum()
}

/// A valid spec from one of the families, then with every width redrawn so
/// counts and surgery see irregular shapes too.
pub fn random_spec(
    rng: &mut ChaCha8Rng,
    dim: usize,
    max_levels: usize,
    irregular: bool,
) -> ArchSpec {
    let family = [Family::Unet, Family::Lunet, Family::Scaled][rng.gen_range(0..3)];
    let mut spec = make_spec(&SpecParams {
        family,
        n_f: rng.gen_range(1..=4),
        levels: rng.gen_range(2..=max_levels),
        convs_per_block: rng.gen_range(1..=3),
        dim,
        in_channels: rng.gen_range(1..=2),
        num_labels: rng.gen_range(1..=3),
        scale_percent: (family == Family::Scaled).then(|| [25.0, 50.0, 75.0][rng.gen_range(0..3)]),
        kernel: [1, 3][rng.gen_range(0..2)],
        norm: rng.gen_bool(0.5),
    })
    .unwrap();
    if irregular {
        for w in spec.widths.iter_mut().flatten() {
            *w = rng.gen_range(1..=6);
        }
    }
    spec
}

pub fn level_of(spec: &ArchSpec, block: usize) -> usize {
    let l = spec.levels;
    if block < l {
        block
    } else {
        2 * l - 2 - block
    }
}

/// Widest-block schedule by exhaustive ranking of every conv at every step.
#[allow(clippy::needless_range_loop)]
pub fn simulate_widest(spec: &ArchSpec, removals: usize) -> Vec<Vec<Vec<usize>>> {
    let mut w = spec.widths.clone();
    let mut out = vec![w.clone()];
    for _ in 0..removals {
        let mut cands = Vec::new();
        for b in 0..w.len() {
            for c in 0..w[b].len() {
                if w[b][c] >= 2 {
                    // width, deeper level, encoder side, lower conv index
                    let decoder = b >= spec.levels;
                    cands.push((
                        std::cmp::Reverse(w[b][c]),
                        std::cmp::Reverse(level_of(spec, b)),
                        decoder,
                        c,
                        b,
                    ));
                }
            }
        }
        cands.sort();
        let &(_, _, _, c, b) = cands.first().expect("removals exceed the schedule");
        w[b][c] -= 1;
        out.push(w.clone());
    }
    out
}

/// Forward pass output with the given channels' post-activation outputs zeroed.
pub fn forward_masked(model: &UnetModel, input: &Tensor, masked: Option<ChannelId>) -> Tensor {
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), false);
    let pass = model
        .forward_with(&mut g, x, false, &mut |g, c: ConvRef, a| match masked {
            Some(id) if id.conv_ref() == c => {
                let t = g.value(a);
                let (b, ch) = (t.batch(), t.channels());
                let scales = (0..b * ch)
                    .map(|i| if i % ch == id.channel { 0.0 } else { 1.0 })
                    .collect();
                g.channel_scale(a, scales)
            }
            _ => Ok(a),
        })
        .unwrap();
    g.value(pass.output).clone()
}

/// Scalar loss of a model on a fixed input/target, with the piecewise
/// pattern it was computed on: every ReLU's zero mask and the winning
/// position of every max-pool window.
pub fn loss_of(
    model: &UnetModel,
    input: &Tensor,
    target: &Tensor,
    kind: LossKind,
) -> (f64, Vec<u8>) {
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), false);
    let t = g.leaf(target.clone(), false);
    let pass = model.forward(&mut g, x, false).unwrap();
    let l = g.loss(pass.output, t, kind).unwrap();
    let spec = model.spec();
    let mut pattern = Vec::new();
    for (c, a) in &pass.activations {
        let a = g.value(*a);
        pattern.extend(a.data().iter().map(|&v| (v == 0.0) as u8));
        if spec.block_kind(c.block) == BlockKind::Encoder && c.conv + 1 == spec.convs_per_block {
            pattern.extend(pool_winners(a));
        }
    }
    (g.value(l).item(), pattern)
}

/// First index of the maximum in each 2x2 window of a `[B, C, H, W]` tensor.
fn pool_winners(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let mut out = Vec::new();
    for plane in t.data().chunks(h * w) {
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                let idx = [
                    y * w + x,
                    y * w + x + 1,
                    (y + 1) * w + x,
                    (y + 1) * w + x + 1,
                ];
                let best = (0..4).fold(0, |b, k| if plane[idx[k]] > plane[idx[b]] { k } else { b });
                out.push(best as u8);
            }
        }
    }
    out
}

/// Analytic gradients, one vector per parameter tensor.
pub fn grads_of(
    model: &UnetModel,
    input: &Tensor,
    target: &Tensor,
    kind: LossKind,
) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), false);
    let t = g.leaf(target.clone(), false);
    let pass = model.forward(&mut g, x, true).unwrap();
    let l = g.loss(pass.output, t, kind).unwrap();
    g.backward(l).unwrap();
    pass.params
        .iter()
        .map(|&p| g.grad(p).unwrap().to_vec())
        .collect()
}

pub fn desk_synth() -> SynthSpec {
    SynthSpec {
        dim: 2,
        side: DESK_SIDE,
        num_labels: 1,
        n_train: DESK_TRAIN,
        n_test: DESK_TEST,
        seed: 0,
        context_mode: ContextMode::Positional,
    }
}

pub fn desk_data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| generate(&desk_synth()).unwrap())
}

pub fn desk_train(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 8,
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

/// The doubling Unet the pruning criteria run on.
pub fn prune_spec() -> ArchSpec {
    make_spec(&SpecParams {
        family: Family::Unet,
        n_f: 4,
        levels: 4,
        convs_per_block: 2,
        dim: 2,
        norm: true,
        ..SpecParams::default()
    })
    .unwrap()
}

pub fn prune_config(strategy: Strategy, seed: u64) -> StampConfig {
    StampConfig {
        strategy,
        recovery_epochs: 1,
        base_p: 0.05,
        criterion_batches: 4,
        stop_at_fraction: Some(PRUNE_STOP),
        train: desk_train(seed, 0),
        ..StampConfig::default()
    }
}

/// Logs of one strategy over [`SEEDS`], computed once per test binary.
pub fn prune_runs(strategy: Strategy) -> &'static [PruneLog] {
    static RUNS: [OnceLock<Vec<PruneLog>>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let slot = Strategy::ALL.iter().position(|&s| s == strategy).unwrap();
    RUNS[slot].get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut m = build(&prune_spec(), seed).unwrap();
                stamp_loop(&mut m, desk_data(), &prune_config(strategy, seed), &mut ()).unwrap()
            })
            .collect()
    })
}

/// Highest test Dice among events whose channels-remaining fraction is
/// within `half` of `frac`.
pub fn max_dice_near(log: &PruneLog, frac: f64, half: f64) -> Option<f64> {
    log.events
        .iter()
        .filter(|e| (e.pct_remaining - frac).abs() <= half + 1e-12)
        .filter_map(|e| e.dice)
        .max_by(f64::total_cmp)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Redraws biases and norm parameters. Fresh models have zero biases, which
/// puts pre-activations exactly on the ReLU kink wherever a conv reads an
/// all-zero input; finite differences are meaningless there.
pub fn jitter_non_weights(model: &mut UnetModel, rng: &mut ChaCha8Rng) {
    for p in model.parameters_mut() {
        if p.rank() == 1 {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
}
