//! Acceptance criteria 1–13. Prints one `PASS`/`FAIL` line per criterion and
//! exits non-zero when any fails. Arguments select criteria by number.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use regioncast::attention::{naive_kernel, streaming_kernel, AttentionKernel, AttnDims, AuxMeter};
use regioncast::dataio::{synth_generate, Split, SplitSpec};
use regioncast::evalcli::{acc_frame, evaluate, lat_weighted_acc, lat_weighted_rmse, EvalOptions, MetricsReport};
use regioncast::grid::{latitude_weights, GridSpec, LatWeights, RegionBox};
use regioncast::model::{Bound, CountFilter, ForecastModel, ModelConfig, ParamRole, PatchWindow};
use regioncast::numcore::init::{randn, seeded};
use regioncast::numcore::{finite_difference_check, Tensor};
use regioncast::peft::{
    attach, evolutionary_search, glora_forward, lora_accounting, lora_param_count, merge_adapters, merge_glora, unmerge_adapters,
    unmerge_glora, AdapterSpec, AttachOptions, GloraSupports, GloraTags, LayerSpace, LoraAdapter, SearchConfig, SearchSpace, Support,
    Tag, TargetSelector,
};
use regioncast::train::{finetune_regional, lat_weighted_mse, lead_time_suite, train, ForecastData, TrainConfig, TrainMode};

type Outcome = Result<(bool, String), String>;

fn fmt_err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ── desk-scale experiment shared by criteria 3 and 8–11 ──────────────────

const DESK_RESOLUTION: f64 = 11.25;
const DESK_YEARS: usize = 4;
const DESK_SEED: u64 = 7;
const FINETUNE_LEAD: u32 = 72;
const EVAL_WINDOWS: usize = 120;

struct Desk {
    base: ForecastModel,
    global: ForecastData,
    regional: ForecastData,
    region: RegionBox,
    pretrain_secs: f64,
}

fn desk_model_config(grid: GridSpec, vars: Vec<String>) -> ModelConfig {
    ModelConfig {
        embed_dim: 32,
        depth: 2,
        n_heads: 4,
        mlp_ratio: 2,
        patch_size: 2,
        ..ModelConfig::desk(grid, vars.clone(), vars)
    }
}

fn pretrain_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        batch_size: 8,
        max_epochs: 6,
        patience: 2,
        seed: DESK_SEED,
        mode: TrainMode::Fft,
        lead_times: vec![12, 24, 36, 48, 60, 72],
        steps_per_epoch: Some(150),
        max_val_windows: Some(96),
        ..TrainConfig::default()
    }
}

/// Regional fine-tuning shared by every mode; only the mode and adapter
/// settings differ between compared runs.
fn finetune_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs: 8,
        patience: 2,
        seed: DESK_SEED,
        mode,
        lead_times: vec![FINETUNE_LEAD],
        steps_per_epoch: Some(100),
        max_val_windows: Some(96),
        ..TrainConfig::default()
    }
}

fn desk() -> &'static Desk {
    static D: OnceLock<Desk> = OnceLock::new();
    D.get_or_init(|| {
        let start = Instant::now();
        let grid = GridSpec::from_resolution(DESK_RESOLUTION).unwrap();
        let ds = synth_generate(&grid, DESK_YEARS * 730 + 2, DESK_SEED).unwrap();
        let vars = ds.variables().to_vec();
        let cfg = desk_model_config(grid, vars);
        let split = SplitSpec::new([2015, 2016], [2017], [2018]).unwrap();
        let global = ForecastData::new(ds, &cfg, &split, None).unwrap();
        let region = RegionBox::mena();
        let regional = global.with_region(&cfg, Some(&region)).unwrap();
        let mut base = ForecastModel::new(cfg, DESK_SEED).unwrap();
        let report = train(&mut base, &global, &pretrain_config()).unwrap();
        let pretrain_secs = start.elapsed().as_secs_f64();
        eprintln!(
            "  desk pretrain: {} steps, best val loss {:.4} (epoch {}), {pretrain_secs:.0} s",
            report.steps, report.best_val_loss, report.best_epoch
        );
        Desk {
            base,
            global,
            regional,
            region,
            pretrain_secs,
        }
    })
}

fn eval_opts() -> EvalOptions {
    EvalOptions {
        split: Split::Test,
        max_windows: Some(EVAL_WINDOWS),
        ..EvalOptions::default()
    }
}

/// Mean over variables of RMSE in units of each variable's standard deviation.
fn scaled_rmse(r: &MetricsReport, data: &ForecastData, lead: u32) -> f64 {
    let mut s = 0.0;
    for (v, name) in data.targets.iter().enumerate() {
        s += r.get(name, lead).unwrap().rmse / data.target_norm.stats()[v].std;
    }
    s / data.targets.len() as f64
}

fn regional_metrics(model: &ForecastModel) -> MetricsReport {
    let d = desk();
    evaluate(model, &d.regional, Some(&d.region), &[FINETUNE_LEAD], &eval_opts()).unwrap()
}

/// Global model's full-grid forecast cropped to the region.
fn global_baseline() -> &'static MetricsReport {
    static G: OnceLock<MetricsReport> = OnceLock::new();
    G.get_or_init(|| {
        let d = desk();
        evaluate(&d.base, &d.global, Some(&d.region), &[FINETUNE_LEAD], &eval_opts()).unwrap()
    })
}

struct Tuned {
    metrics: MetricsReport,
    trainable: usize,
    peak_bytes: usize,
}

fn tuned(mode: TrainMode, targets: TargetSelector) -> Tuned {
    let d = desk();
    let mut cfg = finetune_config(mode);
    cfg.peft.targets = targets;
    let r = finetune_regional(&d.base, &d.regional, &cfg).unwrap();
    Tuned {
        metrics: regional_metrics(&r.model),
        trainable: r.trainable_params,
        peak_bytes: r.report.peak_bytes,
    }
}

fn regional_fft() -> &'static Tuned {
    static T: OnceLock<Tuned> = OnceLock::new();
    T.get_or_init(|| tuned(TrainMode::Fft, TargetSelector::Attention))
}

fn regional_lora() -> &'static Tuned {
    static T: OnceLock<Tuned> = OnceLock::new();
    T.get_or_init(|| tuned(TrainMode::Lora, TargetSelector::Attention))
}

// ── small fixtures ───────────────────────────────────────────────────────

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("var{i}")).collect()
}

fn small_model(seed: u64) -> ForecastModel {
    let grid = GridSpec::from_resolution(22.5).unwrap();
    let cfg = ModelConfig {
        embed_dim: 16,
        depth: 2,
        n_heads: 4,
        mlp_ratio: 2,
        ..ModelConfig::desk(grid, names(3), names(3))
    };
    ForecastModel::new(cfg, seed).unwrap()
}

fn full_glora_tags() -> GloraTags {
    GloraTags {
        u: Tag::LowRank(2),
        v: Tag::LowRank(2),
        x: Tag::Vector,
        y: Tag::Vector,
        z: Tag::Scalar,
    }
}

fn hash_frozen(m: &ForecastModel) -> String {
    let mut h = Sha256::new();
    for (k, p) in m.params().iter().filter(|(_, p)| !p.trainable) {
        h.update(k.as_bytes());
        for x in p.value.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex(h.finalize().as_slice())
}

/// `x Wᵀ + b` by explicit loops.
fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, d) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    Tensor::from_fn(&[n, d], |i| {
        let (row, col) = (i / d, i % d);
        b.data()[col] + (0..k).map(|c| x.data()[row * k + c] * w.data()[col * k + c]).sum::<f64>()
    })
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

// ── criteria ─────────────────────────────────────────────────────────────

fn c01_adapter_identity() -> Outcome {
    let base = small_model(1);
    let x = randn(&[3, 8, 16], 1.0, &mut seeded(2));
    let win = PatchWindow::full(base.config());
    let reference: Vec<Tensor> = [12, 72].iter().map(|&l| base.predict(&x, &names(3), l, &win).unwrap()).collect();
    let specs = [
        ("lora", AdapterSpec::Lora { rank: 4, alpha: None }),
        ("reslora", AdapterSpec::ResLora { rank: 4, alpha: Some(8.0) }),
        ("glora", AdapterSpec::Glora { tags: vec![full_glora_tags()] }),
        ("glora-none", AdapterSpec::Glora { tags: vec![GloraTags::none()] }),
    ];
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (name, spec) in &specs {
        let mut m = base.clone();
        attach(&mut m, spec, &TargetSelector::AttentionFc1Fc2, &AttachOptions::default()).map_err(fmt_err)?;
        let mut dev: f64 = 0.0;
        for (i, &l) in [12, 72].iter().enumerate() {
            dev = dev.max(m.predict(&x, &names(3), l, &win).map_err(fmt_err)?.max_abs_diff(&reference[i]));
        }
        worst = worst.max(dev);
        detail.push(format!("{name} {dev:.1e}"));
    }
    Ok((worst <= 1e-12, format!("max |Δout| {worst:.1e} ≤ 1e-12 ({})", detail.join(", "))))
}

fn c02_merge_equivalence() -> Outcome {
    let mut rng = seeded(20);
    let (mut fwd, mut drift, mut glora_fwd, mut glora_drift): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let mut cases = 0;
    for _ in 0..20 {
        let d = rng.random_range(32..97);
        let k = rng.random_range(32..97);
        let n = rng.random_range(1..9);
        let w = randn(&[d, k], 0.5, &mut rng);
        let bias = randn(&[d], 0.5, &mut rng);
        let x = randn(&[n, k], 1.0, &mut rng);
        for rank in [2, 4, 8, 16, 32] {
            let a = randn(&[rank, k], 1.0 / (k as f64).sqrt(), &mut rng);
            let b = randn(&[d, rank], 0.3, &mut rng);
            let lora = LoraAdapter::from_factors("layer", a.clone(), b.clone(), 2.0 / rank as f64).map_err(fmt_err)?;
            let merged = lora.merge(&w).map_err(fmt_err)?;
            let reference = dense(&x, &merged, &bias);
            fwd = fwd.max(lora.forward(&x, &w, Some(&bias)).map_err(fmt_err)?.max_abs_diff(&reference));
            drift = drift.max(lora.unmerge(&merged).map_err(fmt_err)?.max_abs_diff(&w));

            let s = GloraSupports {
                u: Support::LowRank { b: b.map(|v| 0.1 * v), a: a.clone() },
                v: Support::LowRank { b: b.clone(), a },
                x: Support::Vector(randn(&[k], 0.2, &mut rng)),
                y: Support::Vector(randn(&[d], 0.2, &mut rng)),
                z: Support::Scalar(0.3),
            };
            let (mw, mb) = merge_glora(&w, Some(&bias), &s).map_err(fmt_err)?;
            let reference = dense(&x, &mw, mb.as_ref().unwrap());
            glora_fwd = glora_fwd.max(glora_forward(&x, &w, Some(&bias), &s).map_err(fmt_err)?.max_abs_diff(&reference));
            let (uw, ub) = unmerge_glora(&mw, mb.as_ref(), &s).map_err(fmt_err)?;
            glora_drift = glora_drift.max(uw.max_abs_diff(&w)).max(ub.unwrap().max_abs_diff(&bias));
            cases += 1;
        }
    }
    // whole-model fold of trained-looking adapters
    let mut m = small_model(3);
    attach(&mut m, &AdapterSpec::lora(4), &TargetSelector::AttentionFc1Fc2, &AttachOptions::default()).map_err(fmt_err)?;
    let mut r = seeded(4);
    let paths: Vec<String> = m.params().iter().filter(|(k, _)| k.ends_with("lora.b")).map(|(k, _)| k.clone()).collect();
    for p in paths {
        let shape = m.params().value(&p).map_err(fmt_err)?.shape().to_vec();
        m.params_mut().set_value(&p, randn(&shape, 0.2, &mut r)).map_err(fmt_err)?;
    }
    let x = randn(&[3, 8, 16], 1.0, &mut r);
    let win = PatchWindow::full(m.config());
    let before_w = m.params().clone();
    let y = m.predict(&x, &names(3), 24, &win).map_err(fmt_err)?;
    merge_adapters(&mut m).map_err(fmt_err)?;
    let model_fwd = m.predict(&x, &names(3), 24, &win).map_err(fmt_err)?.max_abs_diff(&y);
    unmerge_adapters(&mut m).map_err(fmt_err)?;
    let mut model_drift: f64 = 0.0;
    for (k, p) in before_w.iter() {
        model_drift = model_drift.max(m.params().value(k).map_err(fmt_err)?.max_abs_diff(&p.value));
    }
    let fwd_all = fwd.max(glora_fwd).max(model_fwd);
    let drift_all = drift.max(glora_drift).max(model_drift);
    Ok((
        fwd_all <= 1e-10 && drift_all <= 1e-12,
        format!(
            "{cases} shape/rank cases: forward gap LoRA {fwd:.1e}, GLoRA {glora_fwd:.1e}, model {model_fwd:.1e} ≤ 1e-10; \
             unmerge drift LoRA {drift:.1e}, GLoRA {glora_drift:.1e}, model {model_drift:.1e} ≤ 1e-12"
        ),
    ))
}

fn c03_frozen_base() -> Outcome {
    let d = desk();
    let mut m = d.base.clone();
    attach(&mut m, &AdapterSpec::lora(16), &TargetSelector::Attention, &AttachOptions::default()).map_err(fmt_err)?;
    let frozen_before: BTreeSet<String> = m.params().iter().filter(|(_, p)| !p.trainable).map(|(k, _)| k.clone()).collect();
    let before = hash_frozen(&m);
    let cfg = TrainConfig {
        max_epochs: 4,
        patience: 10,
        steps_per_epoch: Some(50),
        max_val_windows: Some(16),
        ..finetune_config(TrainMode::Lora)
    };
    let head_before = m.params().value("head.weight").map_err(fmt_err)?.clone();
    let r = train(&mut m, &d.regional, &cfg).map_err(fmt_err)?;
    let after = hash_frozen(&m);
    let frozen_after: BTreeSet<String> = m.params().iter().filter(|(_, p)| !p.trainable).map(|(k, _)| k.clone()).collect();
    let moved = m.params().value("head.weight").map_err(fmt_err)?.max_abs_diff(&head_before) > 0.0;
    Ok((
        r.steps == 200 && before == after && frozen_before == frozen_after && moved,
        format!(
            "{} steps; {} frozen tensors, SHA-256 {}… before and {}… after; trainable head moved: {moved}",
            r.steps,
            frozen_before.len(),
            &before[..16],
            &after[..16]
        ),
    ))
}

fn c04_gradient_check() -> Outcome {
    let grid = GridSpec::new(vec![-45.0, -15.0, 15.0, 45.0], (0..8).map(|j| 22.5 + 45.0 * j as f64).collect()).map_err(fmt_err)?;
    let cfg = ModelConfig {
        embed_dim: 8,
        depth: 2,
        n_heads: 2,
        mlp_ratio: 2,
        init_std: 0.3,
        attention: AttentionKernel::Streaming { tile_k: 3 },
        aggregation_attention: AttentionKernel::Streaming { tile_k: 1 },
        ..ModelConfig::desk(grid.clone(), names(2), names(2))
    };
    let mut m = ForecastModel::new(cfg, 40).map_err(fmt_err)?;
    let attn: Vec<String> = ["q", "k", "v", "proj"].iter().flat_map(|s| (0..2).map(move |b| format!("blocks.{b}.attn.{s}"))).collect();
    attach(&mut m, &AdapterSpec::lora(2), &TargetSelector::Explicit(attn), &AttachOptions::default()).map_err(fmt_err)?;
    let mlp = vec!["blocks.0.mlp.fc1".to_string(), "blocks.1.mlp.fc2".to_string()];
    // A scalar Z shifts every feature of a token equally; the next LayerNorm
    // cancels it, so its exact gradient is zero and only rounding noise
    // remains. Z is checked in vector form.
    let tags = vec![
        GloraTags {
            z: Tag::Vector,
            ..full_glora_tags()
        },
        GloraTags {
            u: Tag::Scalar,
            v: Tag::Vector,
            x: Tag::Scalar,
            y: Tag::Scalar,
            z: Tag::Vector,
        },
    ];
    attach(&mut m, &AdapterSpec::Glora { tags }, &TargetSelector::Explicit(mlp), &AttachOptions::default()).map_err(fmt_err)?;
    // move every adapter tensor off its identity initialization
    let mut rng = seeded(41);
    let adapter_paths: Vec<String> = m.params().iter().filter(|(_, p)| p.role == ParamRole::Adapter).map(|(k, _)| k.clone()).collect();
    for p in &adapter_paths {
        let shape = m.params().value(p).map_err(fmt_err)?.shape().to_vec();
        m.params_mut().set_value(p, randn(&shape, 0.3, &mut rng)).map_err(fmt_err)?;
    }
    let x = randn(&[2, 4, 8], 1.0, &mut rng);
    let target = randn(&[2, 4, 8], 1.0, &mut rng);
    let weights = latitude_weights(&grid).map_err(fmt_err)?;
    let paths: Vec<String> = m.params().iter().map(|(k, _)| k.clone()).collect();
    let values: Vec<Tensor> = m.params().iter().map(|(_, p)| p.value.clone()).collect();
    let n_coords: usize = values.iter().map(|v| v.len()).sum();
    let report = finite_difference_check(&values, 1e-5, |t, vars| {
        let bound = Bound::new(paths.iter().cloned().zip(vars.iter().copied()));
        let y = m.forward(t, &bound, &x, &names(2), 36, &PatchWindow::full(m.config()))?;
        lat_weighted_mse(t, y, &target, &weights)
    })
    .map_err(fmt_err)?;
    let worst = report.worst.map(|(i, c)| format!("{}[{c}]", paths[i])).unwrap_or_default();
    Ok((
        report.max_rel_err <= 1e-4,
        format!(
            "max rel err {:.2e} ≤ 1e-4 over {} coordinates ({} tensors, {} adapter tensors); worst {worst}: tape {:.6e}, central difference {:.6e}",
            report.max_rel_err,
            n_coords,
            values.len(),
            adapter_paths.len(),
            report.analytic,
            report.numeric
        ),
    ))
}

fn c05_attention_oracle() -> Outcome {
    let mut rng = seeded(50);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let dims = AttnDims {
            heads: rng.random_range(1..4),
            n_q: rng.random_range(1..70),
            n_k: rng.random_range(1..70),
            d_h: rng.random_range(1..17),
        };
        let tile = rng.random_range(1..80);
        let q = randn(&[dims.heads * dims.n_q * dims.d_h], 1.5, &mut rng);
        let k = randn(&[dims.heads * dims.n_k * dims.d_h], 1.5, &mut rng);
        let v = randn(&[dims.heads * dims.n_k * dims.d_h], 1.0, &mut rng);
        let s = dims.default_scale();
        let a = naive_kernel(q.data(), k.data(), v.data(), dims, s, &mut AuxMeter::new()).map_err(fmt_err)?;
        let (b, _) = streaming_kernel(q.data(), k.data(), v.data(), dims, s, tile, &mut AuxMeter::new()).map_err(fmt_err)?;
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let dims = AttnDims {
        heads: 1,
        n_q: 256,
        n_k: 256,
        d_h: 32,
    };
    let q = randn(&[256 * 32], 1.0, &mut rng);
    let mut meter = AuxMeter::new();
    streaming_kernel(q.data(), q.data(), q.data(), dims, dims.default_scale(), 32, &mut meter).map_err(fmt_err)?;
    let frac = meter.peak_scalars() as f64 / dims.score_matrix_scalars() as f64;
    Ok((
        worst <= 1e-10 && frac < 0.25,
        format!("50 cases max |Δ| {worst:.1e} ≤ 1e-10; n=256 tile 32 aux peak {:.1}% < 25% of the score matrix", 100.0 * frac),
    ))
}

fn c06_metric_identities() -> Outcome {
    let grid = GridSpec::from_resolution(11.25).map_err(fmt_err)?;
    let w = latitude_weights(&grid).map_err(fmt_err)?;
    let (h, wd) = (grid.n_lat, grid.n_lon);
    let mut rng = seeded(60);
    let preds: Vec<Tensor> = (0..3).map(|_| randn(&[2, h, wd], 1.0, &mut rng)).collect();
    let truths: Vec<Tensor> = (0..3).map(|_| randn(&[2, h, wd], 1.0, &mut rng)).collect();
    let clim = randn(&[2, h, wd], 0.5, &mut rng);
    let vn = names(2);
    let rmse = lat_weighted_rmse(&preds, &truths, &w).map_err(fmt_err)?;
    let acc = lat_weighted_acc(&preds, &truths, &clim, &w, &vn).map_err(fmt_err)?;
    let mut gap: f64 = 0.0;
    for v in 0..2 {
        let (mut r_or, mut a_or) = (0.0, 0.0);
        for t in 0..3 {
            let (mut se, mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..h {
                for j in 0..wd {
                    let k = (v * h + i) * wd + j;
                    let (p, q, c) = (preds[t].data()[k], truths[t].data()[k], clim.data()[k]);
                    se += w.w[i] * (p - q) * (p - q);
                    pt += w.w[i] * (p - c) * (q - c);
                    pp += w.w[i] * (p - c) * (p - c);
                    tt += w.w[i] * (q - c) * (q - c);
                }
            }
            r_or += (se / (h * wd) as f64).sqrt() / 3.0;
            a_or += pt / (pp * tt).sqrt() / 3.0;
        }
        gap = gap.max((rmse[v] - r_or).abs()).max((acc[v] - a_or).abs());
    }
    let perfect = lat_weighted_acc(&truths, &truths, &clim, &w, &vn).map_err(fmt_err)?;
    let mirrored: Vec<Tensor> = truths.iter().map(|t| clim.zip_map(t, |c, x| 2.0 * c - x).unwrap()).collect();
    let anti = lat_weighted_acc(&mirrored, &truths, &clim, &w, &vn).map_err(fmt_err)?;
    let b = -1.75;
    let offset: Vec<Tensor> = truths.iter().map(|t| t.map(|x| x + b)).collect();
    let bias = lat_weighted_rmse(&offset, &truths, &LatWeights::uniform(h)).map_err(fmt_err)?;
    let undefined = acc_frame(&clim, &truths[0], &clim, &w).map_err(fmt_err)?.iter().all(Option::is_none);
    let broadcast = w.broadcast(2, wd);
    let wmean = broadcast.data().iter().sum::<f64>() / broadcast.len() as f64;
    let e1 = perfect.iter().map(|a| (a - 1.0).abs()).fold(0.0, f64::max);
    let e2 = anti.iter().map(|a| (a + 1.0).abs()).fold(0.0, f64::max);
    let e3 = bias.iter().map(|r| (r - b.abs()).abs()).fold(0.0, f64::max);
    let e4 = (wmean - 1.0).abs();
    Ok((
        gap <= 1e-12 && e1 <= 1e-12 && e2 <= 1e-12 && e3 <= 1e-12 && e4 <= 1e-12 && undefined,
        format!(
            "oracle gap {gap:.1e}; |ACC(p=t)−1| {e1:.1e}; |ACC(anti)+1| {e2:.1e}; |RMSE(bias)−|b|| {e3:.1e}; \
             |mean w − 1| {e4:.1e}; zero-variance ACC undefined: {undefined}"
        ),
    ))
}

fn c07_parameter_accounting() -> Outcome {
    let mut all_match = true;
    let mut detail = Vec::new();
    for (targets, rank) in [(TargetSelector::Attention, 8), (TargetSelector::AttentionFc1Fc2, 4)] {
        let base = small_model(70);
        let mut m = base.clone();
        let paths = attach(&mut m, &AdapterSpec::lora(rank), &targets, &AttachOptions { train_head: false, seed: 0 }).map_err(fmt_err)?;
        let closed: usize = paths
            .iter()
            .map(|p| {
                let s = base.params().value(&format!("{p}.weight")).unwrap().shape();
                lora_param_count(rank, s[0], s[1])
            })
            .sum();
        let added = m.count_parameters(CountFilter::All) - base.count_parameters(CountFilter::All);
        let trainable = m.count_parameters(CountFilter::Trainable);
        let acct = lora_accounting(base.config(), &targets, rank).map_err(fmt_err)?;
        let ok = closed == added && closed == trainable && acct.adapter == closed && acct.base == base.count_parameters(CountFilter::All);
        all_match &= ok;
        detail.push(format!("{targets} r{rank}: {closed} closed-form = {added} counted"));
    }
    let full = lora_accounting(&ModelConfig::full_scale(), &TargetSelector::Attention, 16).map_err(fmt_err)?;
    let frac = full.fraction_with_head();
    Ok((
        all_match && frac <= 0.20,
        format!(
            "{}; full-scale LoRA r16: {:.1}M trainable of {:.1}M ({:.1}% with head, {:.1}% without) ≤ 20%",
            detail.join("; "),
            full.trainable_with_head as f64 / 1e6,
            full.total() as f64 / 1e6,
            100.0 * frac,
            100.0 * full.fraction_without_head()
        ),
    ))
}

fn c08_regional_beats_global() -> Outcome {
    let d = desk();
    let global = global_baseline();
    let regional = &regional_fft().metrics;
    let mut wins = 0;
    let mut detail = Vec::new();
    for name in &d.regional.targets {
        let (g, r) = (global.get(name, FINETUNE_LEAD).unwrap().rmse, regional.get(name, FINETUNE_LEAD).unwrap().rmse);
        if r < g {
            wins += 1;
        }
        detail.push(format!("{name} {:.3}", r / g));
    }
    Ok((
        wins >= 6,
        format!(
            "regional beats global on {wins}/7 variables (RMSE ratio regional/global: {}); pretrain {:.0} s",
            detail.join(", "),
            d.pretrain_secs
        ),
    ))
}

fn c09_lora_vs_fft() -> Outcome {
    let d = desk();
    let (fft, lora) = (regional_fft(), regional_lora());
    let (sf, sl) = (scaled_rmse(&fft.metrics, &d.regional, FINETUNE_LEAD), scaled_rmse(&lora.metrics, &d.regional, FINETUNE_LEAD));
    let ratio = sl / sf;
    Ok((
        ratio <= 1.10 && lora.peak_bytes < fft.peak_bytes && lora.trainable < fft.trainable,
        format!(
            "scaled RMSE LoRA/fft {ratio:.3} ≤ 1.10 ({sl:.4} vs {sf:.4}); peak bytes {} < {}; trainable {} < {}",
            lora.peak_bytes, fft.peak_bytes, lora.trainable, fft.trainable
        ),
    ))
}

fn c10_fc_extension() -> Outcome {
    let d = desk();
    let lora = regional_lora();
    let fc = tuned(TrainMode::Lora, TargetSelector::AttentionFc1Fc2);
    let (sl, sfc) = (scaled_rmse(&lora.metrics, &d.regional, FINETUNE_LEAD), scaled_rmse(&fc.metrics, &d.regional, FINETUNE_LEAD));
    let ratio = sfc / sl;
    Ok((
        ratio >= 0.98,
        format!("scaled RMSE (LoRA+fc1fc2)/LoRA {ratio:.4} ≥ 0.98 ({sfc:.4} vs {sl:.4}; {} vs {} trainable)", fc.trainable, lora.trainable),
    ))
}

fn c11_lead_time_trend() -> Outcome {
    let d = desk();
    let leads = [12, 24, 36, 48, 60, 72];
    let cfg = TrainConfig {
        max_epochs: 5,
        ..finetune_config(TrainMode::Lora)
    };
    let suite = lead_time_suite(&d.base, &d.regional, &leads, &cfg, &eval_opts()).map_err(fmt_err)?;
    let scores: Vec<f64> = suite.entries.iter().map(|e| scaled_rmse(&e.metrics, &d.regional, e.lead_hours)).collect();
    let inversions = scores.windows(2).filter(|w| w[1] < w[0]).count();
    let shown: Vec<String> = leads.iter().zip(&scores).map(|(l, s)| format!("{l}h {s:.4}")).collect();
    Ok((inversions <= 1, format!("scaled RMSE by lead: {}; {inversions} inversion(s) ≤ 1", shown.join(", "))))
}

fn c12_search_sanity() -> Outcome {
    let layers: Vec<LayerSpace> = (0..4).map(|i| LayerSpace::standard(format!("blocks.{i}.attn.q"), 4, true)).collect();
    let space = SearchSpace::new(layers).map_err(fmt_err)?;
    let count = |t: &[GloraTags]| -> regioncast::Result<f64> {
        Ok(t.iter().flat_map(|g| g.as_array()).filter(|x| *x != Tag::None).count() as f64)
    };
    let cfg = SearchConfig {
        budget: 50,
        seed: 12,
        ..SearchConfig::default()
    };
    let a = evolutionary_search(&space, &cfg, count).map_err(fmt_err)?;
    let b = evolutionary_search(&space, &cfg, count).map_err(fmt_err)?;
    let found = a.best.layers.iter().all(|g| *g == GloraTags::none());
    let same = a.history == b.history && a.best == b.best;
    // without the identity-seeded start the optimum must be found by evolution
    let random_cfg = SearchConfig {
        seed_identity: false,
        ..cfg.clone()
    };
    let r = evolutionary_search(&space, &random_cfg, count).map_err(fmt_err)?;
    let start = r.history.iter().take(cfg.population).filter_map(|g| g.fitness).fold(f64::INFINITY, f64::min);
    Ok((
        found && same && a.evaluations() <= 50,
        format!(
            "all-none optimum found in {} evaluations (budget 50, {} genomes in space); deterministic: {same}; \
             random start: best {} from initial best {start} in {} evaluations",
            a.evaluations(),
            space.size(),
            r.best.fitness.unwrap_or(f64::NAN),
            r.evaluations()
        ),
    ))
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_regioncast")).args(args).current_dir(cwd).output().map_err(fmt_err)?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn c13_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(fmt_err)?;
    let dir = tmp.path();
    let cfg = r#"{"model": {"embed_dim": 16, "depth": 1, "n_heads": 2},
        "pretrain": {"max_epochs": 2, "steps_per_epoch": 10, "max_val_windows": 8, "lead_times": [12, 24]},
        "finetune": {"max_epochs": 2, "steps_per_epoch": 10, "max_val_windows": 8, "lead_times": [24]},
        "eval": {"max_windows": 8}}"#;
    std::fs::write(dir.join("cfg.json"), cfg).map_err(fmt_err)?;
    run_cli(&["gen-data", "--out", "data", "--resolution", "22.5", "--years", "3", "--seed", "5"], dir)?;
    let mut files = Vec::new();
    for id in ["p1", "p2"] {
        run_cli(&["pretrain", "--data", "data", "--config", "cfg.json", "--run-id", id], dir)?;
        files.push(format!("runs/{id}/metrics.json"));
    }
    for id in ["f1", "f2"] {
        run_cli(&["finetune", "--data", "data", "--base", "runs/p1", "--config", "cfg.json", "--mode", "lora", "--rank", "4", "--run-id", id], dir)?;
        files.push(format!("runs/{id}/metrics.json"));
    }
    run_cli(&["replay", "--manifest", "runs/f1/manifest.json", "--run-id", "f3"], dir)?;
    files.push("runs/f3/metrics.json".into());
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(fmt_err);
    let (p1, p2, f1, f2, f3) = (read(&files[0])?, read(&files[1])?, read(&files[2])?, read(&files[3])?, read(&files[4])?);
    let manifests_match = !read("runs/f1/manifest.json")?.is_empty();
    let same = p1 == p2 && f1 == f2 && f1 == f3;
    let digest = |b: &[u8]| hex(&Sha256::digest(b))[..16].to_string();
    Ok((
        same && manifests_match,
        format!(
            "pretrain twice {} / {}; finetune twice and replayed {} / {} / {}",
            digest(&p1),
            digest(&p2),
            digest(&f1),
            digest(&f2),
            digest(&f3)
        ),
    ))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 13] = [
    (1, "adapter identity", c01_adapter_identity),
    (2, "merge equivalence", c02_merge_equivalence),
    (3, "frozen base immutability", c03_frozen_base),
    (4, "gradient correctness", c04_gradient_check),
    (5, "attention oracle equivalence", c05_attention_oracle),
    (6, "metric identities", c06_metric_identities),
    (7, "parameter accounting", c07_parameter_accounting),
    (8, "regional beats global", c08_regional_beats_global),
    (9, "LoRA competitive with fft", c09_lora_vs_fft),
    (10, "fc extension does not help", c10_fc_extension),
    (11, "lead-time trend", c11_lead_time_trend),
    (12, "evolutionary search sanity", c12_search_sanity),
    (13, "CLI reproducibility", c13_reproducibility),
];

fn main() {
    // numeric arguments select criteria; harness flags are ignored
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let listing = std::env::args().any(|a| a == "--list");
    if listing {
        for (n, name, _) in CRITERIA {
            println!("criterion_{n:02}: test");
            let _ = name;
        }
        return;
    }
    let mut failed = Vec::new();
    for (n, name, f) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok((p, d)) => (p, d),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("{} criterion {n:>2} {name}: {detail} [{secs:.1} s]", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
