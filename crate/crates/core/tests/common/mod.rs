//! Shared fixtures, independent oracles and the property checks used by
//! both the integration tests and the acceptance harness. Every check
//! returns `Ok(detail)` or `Err(reason)`.
#![allow(dead_code)]

use oss_core::attention::{mask_allows, rope_apply, AttentionConfig, LayerKind, YarnParams};
use oss_core::engine::{SamplerConfig, ScriptedModel, Session};
use oss_core::harmony::{
    self, parse_conversation, render_conversation, resolve_conflict, strip_prior_cot, Channel, Conversation, Message,
    ParamType, ReasoningLevel, Role, ToolSchema,
};
use oss_core::model::{preset_config, Model, ModelConfig};
use oss_core::moe::{route_topk, Expert, ExpertBiases, MoeConfig, MoeWeights, Weight};
use oss_core::quant::{
    dequantize_block, max_rounding_error, quantize_block, QuantizedTensor, BLOCK_SIZE, E2M1_MAGNITUDES,
};
use oss_core::tensor::{softmax_with_sink, SwigluParams, Tensor};
use oss_core::tools::ToolRegistry;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max)
}

pub fn random_tokens(r: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| r.random_range(0..vocab as u32)).collect()
}

pub fn toy_config() -> ModelConfig {
    preset_config("toy").unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- mxfp4

/// Distance from `x` to the nearest lattice point at this scale, and half of
/// the gap it falls in (the local rounding bound).
fn local_half_gap(x: f64, scale: f64) -> f64 {
    let a = x.abs() / scale;
    let mags: Vec<f64> = E2M1_MAGNITUDES.iter().map(|&m| f64::from(m)).collect();
    for w in mags.windows(2) {
        if a <= w[1] {
            return 0.5 * (w[1] - w[0]) * scale;
        }
    }
    0.0
}

pub fn check_mxfp4(blocks: usize) -> Check {
    let mut r = rng(0x5eed_0001);
    let mut worst_ratio = 0.0f64;
    for b in 0..blocks {
        let mag = 2f32.powi(r.random_range(-20..20));
        let mut v = [0f32; BLOCK_SIZE];
        for x in &mut v {
            *x = r.random_range(-1.0f32..1.0) * mag;
        }
        let q = quantize_block(&v).map_err(|e| e.to_string())?;
        let back = dequantize_block(&q);
        let scale = 2f64.powi(i32::from(q.scale_exp));
        let bound = max_rounding_error(q.scale_exp);
        for (i, (&x, &y)) in v.iter().zip(&back).enumerate() {
            let err = (f64::from(x) - f64::from(y)).abs();
            let local = local_half_gap(f64::from(x), scale);
            ensure(err <= local * (1.0 + 1e-12) && err <= bound, || {
                format!("block {b} element {i}: |{x} - {y}| = {err:e} exceeds half-step {local:e}")
            })?;
            if bound > 0.0 {
                worst_ratio = worst_ratio.max(err / bound);
            }
        }
    }
    // Representable vectors: lattice points times a power of two.
    for t in 0..blocks / 10 {
        let e = r.random_range(-30..30);
        let mut v = [0f32; BLOCK_SIZE];
        for x in &mut v {
            let m = E2M1_MAGNITUDES[r.random_range(0..8)];
            let s = if r.random_bool(0.5) { -1.0 } else { 1.0 };
            *x = s * m * 2f32.powi(e);
        }
        v[0] = 6.0 * 2f32.powi(e);
        let back = dequantize_block(&quantize_block(&v).map_err(|e| e.to_string())?);
        ensure(back == v, || format!("representable vector {t} did not round-trip exactly"))?;
    }
    let t = Tensor::from_vec(&[64, 96], (0..64 * 96).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let q = QuantizedTensor::quantize(&t).map_err(|e| e.to_string())?;
    ensure(q.storage_bits() == 4.25, || format!("bits/param {} != 4.25", q.storage_bits()))?;
    Ok(format!(
        "{blocks} blocks within half-step (worst err/bound {worst_ratio:.3}), representable exact, 4.25 bits/param"
    ))
}

// ---------------------------------------------------------------- attention

pub fn check_cache_equivalence() -> Check {
    let mut worst = 0.0f64;
    for (bandwidth, len, seed) in [(128usize, 150usize, 1u64), (8, 40, 2)] {
        let mut cfg = toy_config();
        cfg.attention.bandwidth = bandwidth;
        let model = Model::init_random(&cfg, seed).map_err(|e| e.to_string())?;
        let tokens = random_tokens(&mut rng(seed), len, cfg.vocab_size);
        let full = model.forward_full(&tokens).map_err(|e| e.to_string())?;
        for chunk in [1usize, 7] {
            let mut cache = model.new_cache();
            let mut rows = Vec::new();
            for c in tokens.chunks(chunk) {
                rows.extend_from_slice(model.forward(c, &mut cache).map_err(|e| e.to_string())?.data());
            }
            let d = max_abs_diff(full.data(), &rows);
            worst = worst.max(d);
            ensure(d <= 1e-5, || format!("bandwidth {bandwidth}, chunk {chunk}: max |diff| {d:e} > 1e-5"))?;
        }
    }
    Ok(format!("max |cached - full| = {worst:.2e}"))
}

pub fn one_layer_config(kind: LayerKind) -> ModelConfig {
    let mut cfg = toy_config();
    cfg.n_layers = 1;
    cfg.attention.layer_pattern = vec![kind];
    cfg
}

pub fn check_banded_insensitivity() -> Check {
    let cfg = one_layer_config(LayerKind::Banded);
    let bw = cfg.attention.bandwidth;
    ensure(bw == 128, || format!("bandwidth {bw}"))?;
    let model = Model::init_random(&cfg, 3).map_err(|e| e.to_string())?;
    let mut r = rng(3);
    let len = 200;
    let last = len - 1;
    let tokens = random_tokens(&mut r, len, cfg.vocab_size);
    let mut far = tokens.clone();
    for t in far.iter_mut().take(last + 1 - bw) {
        *t = (*t + 1 + r.random_range(0..100)) % cfg.vocab_size as u32;
    }
    let row = |toks: &[u32]| -> Result<Vec<f32>, String> {
        let l = model.forward_full(toks).map_err(|e| e.to_string())?;
        Ok(l.row(last).to_vec())
    };
    let base = row(&tokens)?;
    let d = max_abs_diff(&base, &row(&far)?);
    ensure(d == 0.0, || format!("changing tokens outside the window moved the last logits by {d:e}"))?;
    let mut near = tokens.clone();
    near[last + 1 - bw] = (near[last + 1 - bw] + 1) % cfg.vocab_size as u32;
    let d_near = max_abs_diff(&base, &row(&near)?);
    ensure(d_near > 0.0, || "the oldest in-window token had no effect".into())?;
    ensure(!mask_allows(last, last - bw, LayerKind::Banded, bw) && mask_allows(last, last + 1 - bw, LayerKind::Banded, bw), || {
        "mask boundary is not at bandwidth".into()
    })?;
    // The same change does reach a dense layer.
    let dense = Model::init_random(&one_layer_config(LayerKind::Dense), 3).map_err(|e| e.to_string())?;
    let a = dense.forward_full(&tokens).map_err(|e| e.to_string())?;
    let b = dense.forward_full(&far).map_err(|e| e.to_string())?;
    ensure(max_abs_diff(a.row(last), b.row(last)) > 0.0, || "dense layer ignored distant tokens".into())?;
    Ok(format!("{} tokens beyond the 128-token window changed nothing; in-window change moved logits by {d_near:.2e}", last + 1 - bw))
}

pub fn check_sink_softmax(cases: usize) -> Check {
    let mut r = rng(4);
    for c in 0..cases {
        let n = r.random_range(1..16);
        let scores: Vec<f32> = (0..n).map(|_| r.random_range(-5.0f32..5.0)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        mask[r.random_range(0..n)] = true;
        let sink = r.random_range(-5.0f32..5.0);
        let p = softmax_with_sink(&scores, sink, &mask).map_err(|e| e.to_string())?;
        let s: f64 = p.iter().map(|&x| f64::from(x)).sum();
        ensure(s < 1.0, || format!("case {c}: finite sink {sink} but sum {s}"))?;
        ensure(p.iter().zip(&mask).all(|(&x, &m)| m || x == 0.0), || format!("case {c}: masked key got mass"))?;
        let q = softmax_with_sink(&scores, f32::NEG_INFINITY, &mask).map_err(|e| e.to_string())?;
        let s: f64 = q.iter().map(|&x| f64::from(x)).sum();
        ensure((s - 1.0).abs() <= 1e-6, || format!("case {c}: sink -inf but sum {s}"))?;
    }
    Ok(format!("{cases} cases: sum < 1 for finite sinks, = 1 (1e-6) for -inf"))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

pub fn check_rope_relative(cases: usize) -> Check {
    let cfg = toy_config().attention;
    let hd = cfg.head_dim;
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let kind = if c % 2 == 0 { LayerKind::Banded } else { LayerKind::Dense };
        let q: Vec<f32> = (0..hd).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let k: Vec<f32> = (0..hd).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let m = r.random_range(0..60_000usize);
        let n = r.random_range(0..60_000usize);
        let s = r.random_range(0..10_000usize);
        let rope = |v: &[f32], p| rope_apply(v, p, &cfg, kind).map_err(|e| e.to_string());
        let a = dot(&rope(&q, m)?, &rope(&k, n)?);
        let b = dot(&rope(&q, m + s)?, &rope(&k, n + s)?);
        worst = worst.max((a - b).abs());
        ensure((a - b).abs() <= 1e-5, || format!("case {c}: <R(m)q, R(n)k> moved by {:e} under shift {s}", (a - b).abs()))?;
    }
    Ok(format!("{cases} cases, max drift {worst:.2e}"))
}

pub fn check_yarn_identity() -> Check {
    let mut cfg = toy_config().attention;
    cfg.yarn = YarnParams::standard(1.0, 4096, cfg.head_dim, cfg.rope_theta);
    ensure(cfg.yarn.attn_temperature == 1.0, || format!("temperature {}", cfg.yarn.attn_temperature))?;
    ensure(cfg.frequencies(LayerKind::Dense) == cfg.base_frequencies(), || "frequencies changed at scale 1".into())?;
    ensure(cfg.logit_scale(LayerKind::Dense) == 1.0 / (cfg.head_dim as f64).sqrt(), || "logit scale changed".into())?;
    // A dense layer with scale-1 YaRN behaves like unscaled RoPE.
    let mut dense = one_layer_config(LayerKind::Dense);
    dense.attention.yarn = cfg.yarn.clone();
    let mut plain = dense.clone();
    plain.attention.layer_pattern = vec![LayerKind::Banded];
    plain.attention.bandwidth = 1 << 20;
    plain.attention.max_context = dense.attention.max_context;
    let a = Model::init_random(&dense, 6).map_err(|e| e.to_string())?;
    let b = Model { config: plain, ..a.clone() };
    let tokens = random_tokens(&mut rng(6), 50, dense.vocab_size);
    let d = max_abs_diff(
        a.forward_full(&tokens).map_err(|e| e.to_string())?.data(),
        b.forward_full(&tokens).map_err(|e| e.to_string())?.data(),
    );
    ensure(d == 0.0, || format!("scale-1 YaRN layer differs from plain RoPE by {d:e}"))?;
    Ok("scale 1: frequencies, temperature and layer outputs unchanged".into())
}

/// Straightforward f64 attention for one layer without YaRN, written
/// independently of the library kernels.
pub fn naive_attention(cfg: &AttentionConfig, w: &oss_core::attention::AttentionWeights, x: &Tensor, kind: LayerKind) -> Vec<f64> {
    let (seq, d) = (x.shape()[0], x.shape()[1]);
    let hd = cfg.head_dim;
    let proj = |m: &Tensor, row: &[f32]| -> Vec<f64> {
        let cols = m.shape()[1];
        (0..cols)
            .map(|j| (0..row.len()).map(|i| f64::from(row[i]) * f64::from(m.data()[i * cols + j])).sum())
            .collect()
    };
    let rope = |v: &mut [f64], pos: usize| {
        for h in v.chunks_mut(hd) {
            for i in 0..hd / 2 {
                let theta = cfg.rope_theta.powf(-2.0 * i as f64 / hd as f64) * pos as f64;
                let (s, c) = theta.sin_cos();
                let (a, b) = (h[2 * i], h[2 * i + 1]);
                h[2 * i] = a * c - b * s;
                h[2 * i + 1] = a * s + b * c;
            }
        }
    };
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for t in 0..seq {
        let row = &x.data()[t * d..(t + 1) * d];
        let mut q = proj(&w.wq, row);
        let mut k = proj(&w.wk, row);
        rope(&mut q, t);
        rope(&mut k, t);
        qs.push(q);
        ks.push(k);
        vs.push(proj(&w.wv, row));
    }
    let group = cfg.n_query_heads / cfg.n_kv_heads;
    let mut out = Vec::new();
    for t in 0..seq {
        let mut heads = vec![0.0f64; cfg.n_query_heads * hd];
        for h in 0..cfg.n_query_heads {
            let kv = h / group;
            let keys: Vec<usize> = (0..=t).filter(|&j| kind == LayerKind::Dense || t - j < cfg.bandwidth).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    (0..hd).map(|i| qs[t][h * hd + i] * ks[j][kv * hd + i]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let sink = f64::from(w.sinks[h]);
            let m = scores.iter().cloned().fold(sink, f64::max);
            let denom: f64 = scores.iter().map(|s| (s - m).exp()).sum::<f64>() + (sink - m).exp();
            for (&j, s) in keys.iter().zip(&scores) {
                let p = (s - m).exp() / denom;
                for i in 0..hd {
                    heads[h * hd + i] += p * vs[j][kv * hd + i];
                }
            }
        }
        let cols = w.wo.shape()[1];
        for c in 0..cols {
            out.push((0..heads.len()).map(|i| heads[i] * f64::from(w.wo.data()[i * cols + c])).sum());
        }
    }
    out
}

// ---------------------------------------------------------------- moe

pub struct MoeInstance {
    pub cfg: MoeConfig,
    pub weights: MoeWeights,
    pub x: Vec<f32>,
}

fn uniform_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn uniform_vec(r: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

pub fn random_moe(r: &mut ChaCha8Rng) -> MoeInstance {
    let n = r.random_range(1..=8usize);
    let k = r.random_range(1..=n.min(4));
    let d = r.random_range(1..=8usize);
    let f = r.random_range(1..=8usize);
    let cfg = MoeConfig {
        n_experts: n,
        top_k: k,
        d_model: d,
        d_ff: f,
        swiglu: SwigluParams::default(),
        expert_bias: r.random_bool(0.5),
        router_bias: r.random_bool(0.5),
    };
    let ws = 2.0 / (d as f32).sqrt();
    let experts = (0..n)
        .map(|_| Expert {
            gate: Weight::Dense(uniform_tensor(r, d, f, ws)),
            lin: Weight::Dense(uniform_tensor(r, d, f, ws)),
            down: Weight::Dense(uniform_tensor(r, f, d, 1.0 / (f as f32).sqrt())),
            biases: cfg.expert_bias.then(|| ExpertBiases {
                gate: uniform_vec(r, f, 0.5),
                lin: uniform_vec(r, f, 0.5),
                down: uniform_vec(r, d, 0.5),
            }),
        })
        .collect();
    let weights = MoeWeights {
        router: uniform_tensor(r, d, n, 1.0),
        router_bias: cfg.router_bias.then(|| uniform_vec(r, n, 0.5)),
        experts,
    };
    let x = uniform_vec(r, d, 3.0);
    MoeInstance { cfg, weights, x }
}

fn dense(w: &Weight) -> &Tensor {
    match w {
        Weight::Dense(t) => t,
        Weight::Mxfp4(_) => panic!("oracle expects dense weights"),
    }
}

fn naive_vecmat(x: &[f64], m: &Tensor) -> Vec<f64> {
    let cols = m.shape()[1];
    (0..cols).map(|j| x.iter().enumerate().map(|(i, v)| v * f64::from(m.data()[i * cols + j])).sum()).collect()
}

fn add(v: Vec<f64>, b: Option<&Vec<f32>>) -> Vec<f64> {
    match b {
        Some(b) => v.iter().zip(b).map(|(x, y)| x + f64::from(*y)).collect(),
        None => v,
    }
}

pub fn oracle_logits(inst: &MoeInstance) -> Vec<f64> {
    let x: Vec<f64> = inst.x.iter().map(|&v| f64::from(v)).collect();
    add(naive_vecmat(&x, &inst.weights.router), inst.weights.router_bias.as_ref())
}

/// Best k-subset by exhaustive enumeration (tie-free logits).
pub fn oracle_subset(logits: &[f64], k: usize) -> Vec<usize> {
    let n = logits.len();
    let mut best: Option<(f64, u32)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| logits[i]).sum();
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, mask));
        }
    }
    let mask = best.unwrap().1;
    (0..n).filter(|i| mask >> i & 1 == 1).collect()
}

pub fn oracle_moe(inst: &MoeInstance) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let logits = oracle_logits(inst);
    let subset = oracle_subset(&logits, inst.cfg.top_k);
    let m = subset.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = subset.iter().map(|&i| (logits[i] - m).exp()).sum();
    let weights: Vec<f64> = subset.iter().map(|&i| (logits[i] - m).exp() / z).collect();
    let x: Vec<f64> = inst.x.iter().map(|&v| f64::from(v)).collect();
    let bound = f64::from(inst.cfg.swiglu.clamp_bound);
    let mut out = vec![0.0f64; inst.cfg.d_model];
    for (&e, &w) in subset.iter().zip(&weights) {
        let ex = &inst.weights.experts[e];
        let b = ex.biases.as_ref();
        let g = add(naive_vecmat(&x, dense(&ex.gate)), b.map(|b| &b.gate));
        let l = add(naive_vecmat(&x, dense(&ex.lin)), b.map(|b| &b.lin));
        let h: Vec<f64> = g
            .iter()
            .zip(&l)
            .map(|(&g, &l)| {
                let g = g.clamp(-bound, bound);
                let l = l.clamp(-bound, bound);
                g / (1.0 + (-g).exp()) * (l + 1.0)
            })
            .collect();
        let y = add(naive_vecmat(&h, dense(&ex.down)), b.map(|b| &b.down));
        for (o, v) in out.iter_mut().zip(y) {
            *o += w * v;
        }
    }
    (subset, weights, out)
}

fn tie_free(logits: &[f64]) -> bool {
    let mut s = logits.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[1] - w[0] > 1e-4)
}

pub const MOE_TOL: f64 = 1e-6;

pub fn check_moe_oracle(instances: usize) -> Check {
    let mut r = rng(7);
    let mut worst_w = 0.0f64;
    let mut worst_y = 0.0f64;
    let mut done = 0;
    let mut clamped = 0;
    while done < instances {
        let inst = random_moe(&mut r);
        let logits = oracle_logits(&inst);
        if !tie_free(&logits) {
            continue;
        }
        let (subset, w, y) = oracle_moe(&inst);
        let got_logits = inst.weights.router_logits(&inst.x).map_err(|e| e.to_string())?;
        let route = route_topk(&got_logits, inst.cfg.top_k).map_err(|e| e.to_string())?;
        let mut got = route.indices.clone();
        ensure(route.indices.windows(2).all(|p| logits[p[0]] > logits[p[1]]), || {
            format!("instance {done}: selection not ordered by logit")
        })?;
        got.sort_unstable();
        ensure(got == subset, || format!("instance {done}: selected {got:?}, oracle {subset:?}"))?;
        for (&i, &gw) in route.indices.iter().zip(&route.weights) {
            let ow = w[subset.iter().position(|&s| s == i).unwrap()];
            worst_w = worst_w.max((f64::from(gw) - ow).abs());
        }
        let out = inst.weights.forward(&inst.x, &inst.cfg).map_err(|e| e.to_string())?;
        let err = out.iter().zip(&y).map(|(a, b)| (f64::from(*a) - b).abs()).fold(0.0, f64::max);
        worst_y = worst_y.max(err);
        ensure(worst_w <= MOE_TOL && err <= MOE_TOL, || {
            format!("instance {done} (n={}, k={}, d={}): weight err {worst_w:e}, output err {err:e}", inst.cfg.n_experts, inst.cfg.top_k, inst.cfg.d_model)
        })?;
        if inst.weights.experts.iter().any(|e| {
            let g = oss_core::tensor::vecmat(&inst.x, dense(&e.gate)).unwrap();
            g.iter().any(|v| v.abs() > inst.cfg.swiglu.clamp_bound)
        }) {
            clamped += 1;
        }
        done += 1;
    }
    Ok(format!(
        "{instances} instances, max weight err {worst_w:.1e}, max output err {worst_y:.1e} ({clamped} hit the clamp)"
    ))
}

pub fn permute_experts(inst: &MoeInstance, perm: &[usize]) -> MoeWeights {
    // Expert e moves to slot perm[e].
    let n = perm.len();
    let d = inst.cfg.d_model;
    let mut router = vec![0.0f32; d * n];
    let mut bias = inst.weights.router_bias.clone();
    let mut experts = inst.weights.experts.clone();
    for e in 0..n {
        for i in 0..d {
            router[i * n + perm[e]] = inst.weights.router.data()[i * n + e];
        }
        if let (Some(b), Some(src)) = (bias.as_mut(), inst.weights.router_bias.as_ref()) {
            b[perm[e]] = src[e];
        }
        experts[perm[e]] = inst.weights.experts[e].clone();
    }
    MoeWeights {
        router: Tensor::from_vec(&[d, n], router).unwrap(),
        router_bias: bias,
        experts,
    }
}

pub fn check_moe_permutation(instances: usize) -> Check {
    let mut r = rng(8);
    let mut done = 0;
    let mut worst = 0.0f64;
    while done < instances {
        let inst = random_moe(&mut r);
        if !tie_free(&oracle_logits(&inst)) {
            continue;
        }
        let mut perm: Vec<usize> = (0..inst.cfg.n_experts).collect();
        perm.shuffle(&mut r);
        let a = inst.weights.forward(&inst.x, &inst.cfg).map_err(|e| e.to_string())?;
        let b = permute_experts(&inst, &perm).forward(&inst.x, &inst.cfg).map_err(|e| e.to_string())?;
        let d = max_abs_diff(&a, &b);
        worst = worst.max(d);
        ensure(d <= MOE_TOL, || format!("instance {done}: permuted output differs by {d:e}"))?;
        done += 1;
    }
    Ok(format!("{instances} permuted instances, max diff {worst:.1e}"))
}

// ---------------------------------------------------------------- harmony

const CONTENT_CHARS: &[char] = &[
    'a', 'b', 'z', 'Q', '0', '9', ' ', ' ', '\n', '<', '|', '>', '{', '}', '"', ':', ',', '.', '#', '/', '=', 'é', '✓',
];

fn random_text(r: &mut ChaCha8Rng, max_len: usize) -> String {
    loop {
        let n = r.random_range(0..=max_len);
        let s: String = (0..n).map(|_| CONTENT_CHARS[r.random_range(0..CONTENT_CHARS.len())]).collect();
        if !harmony::DELIMITERS.iter().any(|d| s.contains(d)) {
            return s;
        }
    }
}

fn random_ident(r: &mut ChaCha8Rng) -> String {
    const FIRST: &[u8] = b"abcxyz_";
    const REST: &[u8] = b"abcxyz_019";
    let n = r.random_range(0..6);
    let mut s = String::from(FIRST[r.random_range(0..FIRST.len())] as char);
    s.extend((0..n).map(|_| REST[r.random_range(0..REST.len())] as char));
    s
}

fn random_tool_name(r: &mut ChaCha8Rng) -> String {
    match r.random_range(0..3) {
        0 => format!("functions.{}", random_ident(r)),
        1 => format!("browser.{}", random_ident(r)),
        _ => "python".into(),
    }
}

pub fn random_conversation(r: &mut ChaCha8Rng) -> Conversation {
    let level = ReasoningLevel::ALL[r.random_range(0..3)];
    let mut c = Conversation::new(level);
    let n_tools = r.random_range(0..3);
    for i in 0..n_tools {
        let mut t = ToolSchema::new(format!("{}{i}", random_ident(r)), random_text(r, 20).replace('\n', " "));
        for j in 0..r.random_range(0..3) {
            let ty = [ParamType::String, ParamType::Number, ParamType::Integer, ParamType::Boolean, ParamType::Object, ParamType::Array]
                [r.random_range(0..6)];
            t = t.param(format!("{}{j}", random_ident(r)), ty, r.random_bool(0.5));
        }
        c.tools.push(t);
    }
    if r.random_bool(0.5) {
        c.messages.push(Message::system(random_text(r, 30)));
    }
    for _ in 0..r.random_range(0..10) {
        let m = match r.random_range(0..7) {
            0 => Message::developer(random_text(r, 30)),
            1 | 2 => Message::user(random_text(r, 30)),
            3 => Message::assistant([Channel::Analysis, Channel::Commentary, Channel::Final][r.random_range(0..3)], random_text(r, 30)),
            4 => Message::assistant(Channel::Final, random_text(r, 30)),
            5 => Message::tool_call(random_tool_name(r), random_text(r, 20)),
            _ => Message::tool_result(random_tool_name(r), random_text(r, 20)),
        };
        c.messages.push(m);
    }
    c
}

pub fn check_harmony_round_trip(cases: usize) -> Check {
    let mut r = rng(9);
    let mut exact = 0;
    let mut with_prior_cot = 0;
    for i in 0..cases {
        let c = random_conversation(&mut r);
        c.validate().map_err(|e| format!("generator produced invalid conversation {i}: {e}"))?;
        let text = render_conversation(&c).map_err(|e| e.to_string())?;
        let back = parse_conversation(&text).map_err(|e| format!("case {i}: {e}\n{text}"))?;
        let expected = strip_prior_cot(&c);
        ensure(back == expected, || format!("case {i}: round trip mismatch\n{text}\n{back:?}\n{expected:?}"))?;
        if expected == c {
            exact += 1;
        } else {
            with_prior_cot += 1;
        }
    }
    Ok(format!(
        "{cases} conversations: {exact} identical after round trip, {with_prior_cot} equal once prior-turn analysis is dropped"
    ))
}

/// Every ordering of every subset (size >= 2) of roles, each role carrying
/// its own directive. Returns (fixtures, expected winner).
pub fn conflict_fixtures() -> Vec<(Vec<(Role, String)>, String)> {
    let roles = [Role::System, Role::Developer, Role::User, Role::Assistant, Role::Tool];
    let mut out = Vec::new();
    for mask in 0u32..32 {
        let subset: Vec<Role> = (0..5).filter(|i| mask >> i & 1 == 1).map(|i| roles[i]).collect();
        if subset.len() < 2 {
            continue;
        }
        for perm in permutations(&subset) {
            let fixture: Vec<(Role, String)> = perm.iter().map(|r| (*r, format!("obey {r}"))).collect();
            let top = perm.iter().max_by_key(|r| r.rank()).unwrap();
            out.push((fixture, format!("obey {top}")));
        }
    }
    out
}

fn permutations(v: &[Role]) -> Vec<Vec<Role>> {
    if v.len() <= 1 {
        return vec![v.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut rest = v.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

pub fn check_hierarchy() -> Check {
    let fixtures = conflict_fixtures();
    let mut privileged = 0;
    for (f, expected) in &fixtures {
        let got = resolve_conflict(f).map_err(|e| e.to_string())?;
        ensure(&got == expected, || format!("{f:?}: got {got}, expected {expected}"))?;
        if f.iter().any(|(r, _)| matches!(r, Role::System | Role::Developer)) {
            privileged += 1;
            ensure(got == "obey system" || got == "obey developer", || format!("{f:?} resolved to {got}"))?;
        }
    }
    let same = [(Role::User, "first".to_string()), (Role::User, "second".to_string())];
    ensure(resolve_conflict(&same).unwrap() == "second", || "equal ranks should prefer the later directive".into())?;
    ensure(resolve_conflict::<String>(&[]).is_err(), || "empty list must be an error".into())?;
    Ok(format!("{} fixtures ({privileged} with system/developer) resolved to the top-ranked role", fixtures.len()))
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/transcripts")
}

pub fn check_strip_golden() -> Check {
    let read = |name: &str| -> Result<Conversation, String> {
        let text = std::fs::read_to_string(golden_dir().join(name)).map_err(|e| format!("{name}: {e}"))?;
        harmony::read_transcript(&text).map_err(|e| format!("{name}: {e}"))
    };
    let full = read("five_turn.jsonl")?;
    let expected = read("five_turn.stripped.jsonl")?;
    let users = full.messages.iter().filter(|m| m.role == Role::User).count();
    ensure(users == 5, || format!("golden transcript has {users} user turns"))?;
    let stripped = strip_prior_cot(&full);
    ensure(stripped == expected, || "strip_prior_cot output differs from the golden file".into())?;
    let last_user = full.messages.iter().rposition(|m| m.role == Role::User).unwrap();
    let prior_analysis = full.messages[..last_user].iter().filter(|m| m.is_analysis()).count();
    let removed = full.messages.len() - stripped.messages.len();
    ensure(removed == prior_analysis, || format!("removed {removed}, prior analysis {prior_analysis}"))?;
    ensure(strip_prior_cot(&stripped) == stripped, || "strip is not idempotent".into())?;
    let kept_current = stripped.messages[stripped.messages.iter().rposition(|m| m.role == Role::User).unwrap()..]
        .iter()
        .filter(|m| m.is_analysis())
        .count();
    Ok(format!("removed exactly {removed} prior-turn analysis messages, kept {kept_current} in the current turn"))
}

// ---------------------------------------------------------------- end to end

pub const CHAT_PROMPTS: [&str; 10] = [
    "Hello!",
    "What is the capital of France?",
    "Write a haiku about rivers.",
    "List three colors.",
    "How many legs does a spider have?",
    "Translate 'good morning' to Spanish.",
    "What is 12 squared?",
    "Explain recursion briefly.",
    "Name a famous physicist.",
    "Say goodbye.",
];

/// Ten greedy turns with the random toy model, then a scripted tool round trip.
pub fn chat_transcripts() -> Result<(String, String), String> {
    let model = Model::init_random(&toy_config(), 0).map_err(|e| e.to_string())?;
    let tools = ToolRegistry::builtin();
    let mut conv = Conversation::new(ReasoningLevel::Low);
    conv.tools = tools.schemas();
    let mut s = Session::new(&model, conv, SamplerConfig::greedy(32), tools).map_err(|e| e.to_string())?;
    for p in CHAT_PROMPTS {
        s.send_user(p).map_err(|e| e.to_string())?;
    }
    let toy = s.transcript();
    let scripted = ScriptedModel::demo();
    let tools = ToolRegistry::builtin();
    let mut conv = Conversation::new(ReasoningLevel::Low);
    conv.tools = tools.schemas();
    let mut s = Session::new(&scripted, conv, SamplerConfig::greedy(512), tools).map_err(|e| e.to_string())?;
    s.send_user("/echo round trip").map_err(|e| e.to_string())?;
    Ok((toy, s.transcript()))
}

pub fn check_e2e_determinism() -> Check {
    let (a_toy, a_tool) = chat_transcripts()?;
    let (b_toy, b_tool) = chat_transcripts()?;
    ensure(a_toy.as_bytes() == b_toy.as_bytes(), || "toy transcripts differ between runs".into())?;
    ensure(a_tool.as_bytes() == b_tool.as_bytes(), || "tool transcripts differ between runs".into())?;
    let toy = harmony::read_transcript(&a_toy).map_err(|e| e.to_string())?;
    let users = toy.messages.iter().filter(|m| m.role == Role::User).count();
    ensure(users == CHAT_PROMPTS.len(), || format!("{users} user turns"))?;
    let tool = harmony::read_transcript(&a_tool).map_err(|e| e.to_string())?;
    harmony::check_tool_pairing(&tool).map_err(|e| e.to_string())?;
    let call = tool.messages.iter().position(|m| m.recipient.as_deref() == Some("functions.echo"));
    let result = tool.messages.iter().position(|m| m.role == Role::Tool);
    let fin = tool.messages.iter().rposition(|m| m.channel == Some(Channel::Final));
    ensure(matches!((call, result, fin), (Some(c), Some(r), Some(f)) if c < r && r < f), || {
        "tool transcript lacks call -> result -> final".into()
    })?;
    Ok(format!(
        "{} + {} transcript bytes identical across runs; echo call round-tripped",
        a_toy.len(),
        a_tool.len()
    ))
}

// ---------------------------------------------------------------- quantized experts

/// Per-output first-order bound on `|moe_q(x) - moe(x)|` when only expert
/// matrices are quantized (router untouched, so routing is identical).
/// Each weight moves by at most its block's rounding bound `d`; clamping is
/// 1-Lipschitz, `|silu'| <= 1.0999`, `|clamp(l) + 1| <= B + 1`,
/// `|silu(clamp(g))| <= silu(B)`.
pub fn moe_quant_bound(orig: &MoeWeights, quant: &MoeWeights, cfg: &MoeConfig, x: &[f32]) -> Vec<f64> {
    const SILU_SLOPE: f64 = 1.0999;
    let b = f64::from(cfg.swiglu.clamp_bound);
    let silu_b = b / (1.0 + (-b).exp());
    let xd: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let logits = orig.router_logits(x).unwrap();
    let route = route_topk(&logits, cfg.top_k).unwrap();
    let delta = |w: &Weight, idx: usize| -> f64 {
        match w {
            Weight::Mxfp4(q) => max_rounding_error(q.blocks()[idx / BLOCK_SIZE].scale_exp),
            Weight::Dense(_) => 0.0,
        }
    };
    let mut bound = vec![0.0f64; cfg.d_model];
    for (&e, &w) in route.indices.iter().zip(&route.weights) {
        let (eo, eq) = (&orig.experts[e], &quant.experts[e]);
        let f = cfg.d_ff;
        let spread = |wq: &Weight| -> Vec<f64> {
            (0..f).map(|j| (0..cfg.d_model).map(|i| xd[i].abs() * delta(wq, i * f + j)).sum()).collect()
        };
        let (dg, dl) = (spread(&eq.gate), spread(&eq.lin));
        let bi = eo.biases.as_ref();
        let g = add(naive_vecmat(&xd, dense(&eo.gate)), bi.map(|b| &b.gate));
        let l = add(naive_vecmat(&xd, dense(&eo.lin)), bi.map(|b| &b.lin));
        let h: Vec<f64> = g
            .iter()
            .zip(&l)
            .map(|(&g, &l)| {
                let g = g.clamp(-b, b);
                g / (1.0 + (-g).exp()) * (l.clamp(-b, b) + 1.0)
            })
            .collect();
        let dh: Vec<f64> = (0..f).map(|j| SILU_SLOPE * (b + 1.0) * dg[j] + silu_b * dl[j]).collect();
        let down = dense(&eo.down);
        for k in 0..cfg.d_model {
            let mut s = 0.0;
            for j in 0..f {
                s += dh[j] * f64::from(down.data()[j * cfg.d_model + k]).abs();
                s += (h[j].abs() + dh[j]) * delta(&eq.down, j * cfg.d_model + k);
            }
            bound[k] += f64::from(w) * s;
        }
    }
    bound
}
