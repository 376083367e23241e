//! Forward and reverse passes of the dense classifier.
//!
//! Activations are kept per sample as `[C, D, H, W]` tensors. A dense layer
//! computes `norm -> relu -> grouped 1x1x1 -> wavelet conv -> 1x1x1`; its
//! input is the channel concatenation of every node listed in the layer
//! graph, each average-pooled to the layer's stage.

use std::collections::HashMap;

use super::config::NetworkConfig;
use super::graph::{LayerGraph, Node, NodeKind};
use super::params::{bottleneck_groups, layer_wtconv_config, NetworkParams};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    avg_pool, avg_pool_backward, concat_channels, conv, conv_kernel_grad, conv_transposed_to,
    global_avg_pool, global_avg_pool_backward, pad_to_multiple, relu, relu_backward,
    split_channels, ConvSpec, Tensor,
};
use crate::wtconv::{wtconv_backward_cached, wtconv_forward_cached, WTConvCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every normalization layer.
    Train,
    /// Running statistics; samples are independent of each other.
    Eval,
}

const POOL: [usize; 3] = [2, 2, 2];

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<Tensor>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

#[derive(Debug, Clone, Default)]
struct NodeCache {
    input: Vec<Tensor>,
    bn: Option<BnCache>,
    pre_relu: Vec<Tensor>,
    activated: Vec<Tensor>,
    bottleneck: Vec<Tensor>,
    wt: Vec<WTConvCache>,
    wt_out: Vec<Tensor>,
}

/// Everything the reverse pass needs from one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    graph: LayerGraph,
    nodes: Vec<NodeCache>,
    head: NodeCache,
    pooled: Tensor,
    logits: Tensor,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

fn bn_names(layer: &str) -> [String; 4] {
    [
        format!("{layer}.bn.gamma"),
        format!("{layer}.bn.beta"),
        format!("{layer}.bn.running_mean"),
        format!("{layer}.bn.running_var"),
    ]
}

fn bn_forward(
    params: &NetworkParams,
    layer: &str,
    xs: &[Tensor],
    mode: Mode,
    eps: f64,
) -> Result<(Vec<Tensor>, Option<BnCache>)> {
    let [g, b, rm, rv] = bn_names(layer);
    let (gamma, beta) = (params.get(&g)?.data(), params.get(&b)?.data());
    let c = xs[0].channels();
    if gamma.len() != c {
        return Err(shape_err!("{layer}: {} normalization channels for {c} inputs", gamma.len()));
    }
    let (mean, var, count) = match mode {
        Mode::Eval => (
            params.get(&rm)?.data().to_vec(),
            params.get(&rv)?.data().to_vec(),
            0,
        ),
        Mode::Train => {
            let per = xs[0].len() / c;
            let n = per * xs.len();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let s: f64 = xs.iter().map(|x| x.channel(ch).iter().sum::<f64>()).sum();
                let m = s / n as f64;
                let v: f64 = xs
                    .iter()
                    .map(|x| x.channel(ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum();
                mean[ch] = m;
                var[ch] = v / n as f64;
            }
            (mean, var, n)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let mut h = x.clone();
        let mut y = x.clone();
        for ch in 0..c {
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (hv, yv) in h.channel_mut(ch).iter_mut().zip(y.channel_mut(ch).iter_mut()) {
                *hv = (*hv - m) * is;
                *yv = ga * *hv + be;
            }
        }
        xhat.push(h);
        out.push(y);
    }
    let cache = (mode == Mode::Train).then_some(BnCache {
        xhat,
        inv_std,
        mean,
        var,
        count,
    });
    Ok((out, cache))
}

/// Returns input gradients; adds gamma and beta gradients into `grads`.
fn bn_backward(
    params: &NetworkParams,
    grads: &mut NetworkParams,
    layer: &str,
    cache: &BnCache,
    gs: &[Tensor],
) -> Result<Vec<Tensor>> {
    let [g, b, _, _] = bn_names(layer);
    let gamma = params.get(&g)?.data().to_vec();
    let c = gamma.len();
    let n = cache.count as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (gt, h) in gs.iter().zip(&cache.xhat) {
        for ch in 0..c {
            for (gv, hv) in gt.channel(ch).iter().zip(h.channel(ch)) {
                dgamma[ch] += gv * hv;
                dbeta[ch] += gv;
            }
        }
    }
    let mut out = Vec::with_capacity(gs.len());
    for (gt, h) in gs.iter().zip(&cache.xhat) {
        let mut dx = gt.clone();
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / n;
            let (sg, sgh) = (dbeta[ch], dgamma[ch]);
            for (d, hv) in dx.channel_mut(ch).iter_mut().zip(h.channel(ch)) {
                *d = k * (n * *d - sg - hv * sgh);
            }
        }
        out.push(dx);
    }
    grads.get_mut(&g)?.add_assign(&Tensor::new(&[c], dgamma)?)?;
    grads.get_mut(&b)?.add_assign(&Tensor::new(&[c], dbeta)?)?;
    Ok(out)
}

fn pointwise_spec(groups: usize) -> ConvSpec {
    ConvSpec::new(&[1, 1, 1]).with_groups(groups)
}

fn stem_spec() -> ConvSpec {
    ConvSpec::same(&[3, 3, 3])
}

/// Splits `[B, 1, L, M, N]` into per-sample `[1, L, M, N]` tensors.
pub fn split_batch(cfg: &NetworkConfig, batch: &Tensor) -> Result<Vec<Tensor>> {
    let [l, m, n] = cfg.input;
    if batch.rank() != 5 || batch.shape()[1..] != [1, l, m, n] {
        return Err(shape_err!(
            "batch {:?} must be [B, 1, {l}, {m}, {n}]",
            batch.shape()
        ));
    }
    let per = l * m * n;
    (0..batch.dim(0))
        .map(|b| Tensor::new(&[1, l, m, n], batch.data()[b * per..(b + 1) * per].to_vec()))
        .collect()
}

/// Pooled copies of node outputs, keyed by `(node, stage)`.
struct FeatureStore {
    maps: HashMap<(usize, usize), Vec<Tensor>>,
}

impl FeatureStore {
    fn at(&mut self, node: usize, home: usize, stage: usize) -> Result<&Vec<Tensor>> {
        for s in home + 1..=stage {
            if !self.maps.contains_key(&(node, s)) {
                let prev = &self.maps[&(node, s - 1)];
                let pooled = prev
                    .iter()
                    .map(|t| avg_pool(&pad_to_multiple(t, &POOL)?, &POOL))
                    .collect::<Result<Vec<_>>>()?;
                self.maps.insert((node, s), pooled);
            }
        }
        Ok(&self.maps[&(node, stage)])
    }

    fn gather(&mut self, graph: &LayerGraph, inputs: &[usize], stage: usize, batch: usize) -> Result<Vec<Tensor>> {
        for &i in inputs {
            self.at(i, graph.nodes[i].stage, stage)?;
        }
        (0..batch)
            .map(|b| {
                let parts: Vec<&Tensor> = inputs.iter().map(|&i| &self.maps[&(i, stage)][b]).collect();
                concat_channels(&parts)
            })
            .collect()
    }
}

/// Evaluation-mode logits `[B, classes]`.
pub fn forward(params: &NetworkParams, cfg: &NetworkConfig, batch: &Tensor) -> Result<Tensor> {
    run(params, cfg, split_batch(cfg, batch)?, Mode::Eval).map(|(l, _)| l)
}

/// Logits plus the cache consumed by [`backward_from_cache`].
pub fn forward_train(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    batch: &Tensor,
) -> Result<ForwardCache> {
    let (_, cache) = run(params, cfg, split_batch(cfg, batch)?, Mode::Train)?;
    Ok(cache)
}

pub fn forward_mode(params: &NetworkParams, cfg: &NetworkConfig, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    run(params, cfg, split_batch(cfg, batch)?, mode).map(|(l, _)| l)
}

fn run(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    samples: Vec<Tensor>,
    mode: Mode,
) -> Result<(Tensor, ForwardCache)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let graph = LayerGraph::build(cfg);
    let bsz = samples.len();
    let keep = mode == Mode::Train;
    let mut store = FeatureStore {
        maps: HashMap::new(),
    };
    let mut caches = Vec::with_capacity(graph.nodes.len());

    for node in &graph.nodes {
        let mut cache = NodeCache::default();
        let out = match node.kind {
            NodeKind::Stem => {
                let w = params.get("stem.weight")?;
                let out = samples
                    .iter()
                    .map(|x| conv(x, w, &stem_spec()))
                    .collect::<Result<Vec<_>>>()?;
                if keep {
                    cache.input = samples.clone();
                }
                out
            }
            NodeKind::Transition | NodeKind::Dense => {
                let input = store.gather(&graph, &node.inputs, node.stage, bsz)?;
                let (pre, bn) = bn_forward(params, &node.name, &input, mode, cfg.bn_eps)?;
                let act: Vec<Tensor> = pre.iter().map(relu).collect();
                let out = if node.kind == NodeKind::Transition {
                    let w = params.get(&format!("{}.conv.weight", node.name))?;
                    act.iter()
                        .map(|a| conv(a, w, &pointwise_spec(1)))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    dense_forward(params, cfg, node, &act, &mut cache, keep)?
                };
                if keep {
                    cache.bn = bn;
                    cache.pre_relu = pre;
                    cache.activated = act;
                }
                out
            }
        };
        store.maps.insert((node.id, node.stage), out);
        caches.push(cache);
    }

    let last = graph.final_stage();
    let input = store.gather(&graph, &graph.head_inputs, last, bsz)?;
    let (pre, bn) = bn_forward(params, "head", &input, mode, cfg.bn_eps)?;
    let act: Vec<Tensor> = pre.iter().map(relu).collect();
    let c = graph.head_channels;
    let mut pooled = Tensor::zeros(&[bsz, c]);
    for (b, a) in act.iter().enumerate() {
        pooled.data_mut()[b * c..(b + 1) * c].copy_from_slice(global_avg_pool(a).data());
    }
    let logits = linear(&pooled, params.get("head.weight")?, params.get("head.bias")?)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("network forward".into()));
    }
    let head = if keep {
        NodeCache {
            bn,
            pre_relu: pre,
            activated: act,
            ..Default::default()
        }
    } else {
        NodeCache::default()
    };
    let cache = ForwardCache {
        graph,
        nodes: caches,
        head,
        pooled,
        logits: logits.clone(),
    };
    Ok((logits, cache))
}

fn dense_forward(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    node: &Node,
    act: &[Tensor],
    cache: &mut NodeCache,
    keep: bool,
) -> Result<Vec<Tensor>> {
    let width = cfg.bottleneck_width * node.out_channels;
    let groups = bottleneck_groups(cfg, node.in_channels, width);
    let wb = params.get(&format!("{}.bottleneck.weight", node.name))?;
    let wp = params.get(&format!("{}.pointwise.weight", node.name))?;
    let wcfg = layer_wtconv_config(cfg, node.out_channels);
    let wparams = params.wtconv(&node.name, &wcfg)?;
    let mut out = Vec::with_capacity(act.len());
    for a in act {
        let b = conv(a, wb, &pointwise_spec(groups))?;
        let (w, wc) = wtconv_forward_cached(&b, &wcfg, &wparams)?;
        out.push(conv(&w, wp, &pointwise_spec(1))?);
        if keep {
            cache.bottleneck.push(b);
            cache.wt.push(wc);
            cache.wt_out.push(w);
        }
    }
    Ok(out)
}

/// `x W^T + b` for `x: [B, C]`, `W: [K, C]`.
fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = crate::tensor::matmul(x, &crate::tensor::transpose2(w)?)?;
    let k = b.len();
    for row in y.data_mut().chunks_mut(k) {
        row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
    }
    Ok(y)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (bsz, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != bsz {
        return Err(shape_err!("{} labels for {bsz} logit rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let mut grad = Tensor::zeros(&[bsz, k]);
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gv = (p - if j == label { 1.0 } else { 0.0 }) / bsz as f64;
        }
    }
    Ok((loss / bsz as f64, grad))
}

/// Training-mode loss and gradients for every parameter entry (running
/// statistics get zero gradients).
pub fn backward(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, NetworkParams)> {
    let cache = forward_train(params, cfg, batch)?;
    let (loss, dlogits) = softmax_cross_entropy(&cache.logits, labels)?;
    let grads = backward_from_cache(params, cfg, &cache, &dlogits)?;
    Ok((loss, grads))
}

pub fn backward_from_cache(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    cache: &ForwardCache,
    dlogits: &Tensor,
) -> Result<NetworkParams> {
    let graph = &cache.graph;
    let mut grads = params.zeros_like();
    let bsz = dlogits.dim(0);
    let c = graph.head_channels;

    // Head.
    let w = params.get("head.weight")?;
    let dw = crate::tensor::matmul(&crate::tensor::transpose2(dlogits)?, &cache.pooled)?;
    grads.get_mut("head.weight")?.add_assign(&dw)?;
    let k = dlogits.dim(1);
    let db = Tensor::from_fn(&[k], |j| (0..bsz).map(|b| dlogits.data()[b * k + j]).sum());
    grads.get_mut("head.bias")?.add_assign(&db)?;
    let dpooled = crate::tensor::matmul(dlogits, w)?;

    let mut gfeat: HashMap<(usize, usize), Vec<Tensor>> = HashMap::new();
    let head_bn = cache.head.bn.as_ref().ok_or_else(|| {
        Error::InvalidArgument("backward needs a training-mode forward cache".into())
    })?;
    let mut g_act = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let gp = Tensor::new(&[c], dpooled.data()[b * c..(b + 1) * c].to_vec())?;
        let shape = cache.head.activated[b].shape().to_vec();
        let ga = global_avg_pool_backward(&gp, &shape)?;
        g_act.push(relu_backward(&cache.head.pre_relu[b], &ga)?);
    }
    let g_in = bn_backward(params, &mut grads, "head", head_bn, &g_act)?;
    route(graph, &graph.head_inputs, graph.final_stage(), g_in, &mut gfeat)?;

    for node in graph.nodes.iter().rev() {
        let g_out = collect_node_grad(cfg, node, graph.final_stage(), &mut gfeat, bsz)?;
        let nc = &cache.nodes[node.id];
        match node.kind {
            NodeKind::Stem => {
                let w = params.get("stem.weight")?;
                let mut gw = Tensor::zeros(w.shape());
                for (x, g) in nc.input.iter().zip(&g_out) {
                    gw.add_assign(&conv_kernel_grad(x, g, w.shape(), &stem_spec())?)?;
                }
                grads.get_mut("stem.weight")?.add_assign(&gw)?;
            }
            NodeKind::Transition => {
                let name = format!("{}.conv.weight", node.name);
                let w = params.get(&name)?;
                let mut gw = Tensor::zeros(w.shape());
                let mut g_act = Vec::with_capacity(bsz);
                for b in 0..bsz {
                    let spec = pointwise_spec(1);
                    gw.add_assign(&conv_kernel_grad(&nc.activated[b], &g_out[b], w.shape(), &spec)?)?;
                    let ga = conv_transposed_to(&g_out[b], w, &spec, nc.activated[b].spatial())?;
                    g_act.push(relu_backward(&nc.pre_relu[b], &ga)?);
                }
                grads.get_mut(&name)?.add_assign(&gw)?;
                let bn = nc.bn.as_ref().expect("training cache");
                let g_in = bn_backward(params, &mut grads, &node.name, bn, &g_act)?;
                route(graph, &node.inputs, node.stage, g_in, &mut gfeat)?;
            }
            NodeKind::Dense => {
                let g_act = dense_backward(params, cfg, node, nc, &g_out, &mut grads)?;
                let bn = nc.bn.as_ref().expect("training cache");
                let g_in = bn_backward(params, &mut grads, &node.name, bn, &g_act)?;
                route(graph, &node.inputs, node.stage, g_in, &mut gfeat)?;
            }
        }
    }
    Ok(grads)
}

fn dense_backward(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    node: &Node,
    nc: &NodeCache,
    g_out: &[Tensor],
    grads: &mut NetworkParams,
) -> Result<Vec<Tensor>> {
    let width = cfg.bottleneck_width * node.out_channels;
    let groups = bottleneck_groups(cfg, node.in_channels, width);
    let (bn_name, pw_name) = (
        format!("{}.bottleneck.weight", node.name),
        format!("{}.pointwise.weight", node.name),
    );
    let wb = params.get(&bn_name)?;
    let wp = params.get(&pw_name)?;
    let wcfg = layer_wtconv_config(cfg, node.out_channels);
    let wparams = params.wtconv(&node.name, &wcfg)?;
    let mut gwb = Tensor::zeros(wb.shape());
    let mut gwp = Tensor::zeros(wp.shape());
    let mut gwt = wparams.zeros_like();
    let mut g_act = Vec::with_capacity(g_out.len());
    for (b, g) in g_out.iter().enumerate() {
        let spec1 = pointwise_spec(1);
        gwp.add_assign(&conv_kernel_grad(&nc.wt_out[b], g, wp.shape(), &spec1)?)?;
        let g_wt = conv_transposed_to(g, wp, &spec1, nc.wt_out[b].spatial())?;
        let (g_bott, gp) = wtconv_backward_cached(&nc.bottleneck[b], &wcfg, &wparams, &nc.wt[b], &g_wt)?;
        for ((_, acc), (_, t)) in gwt.blocks_mut().into_iter().zip(gp.blocks()) {
            acc.add_assign(t)?;
        }
        let specg = pointwise_spec(groups);
        gwb.add_assign(&conv_kernel_grad(&nc.activated[b], &g_bott, wb.shape(), &specg)?)?;
        let ga = conv_transposed_to(&g_bott, wb, &specg, nc.activated[b].spatial())?;
        g_act.push(relu_backward(&nc.pre_relu[b], &ga)?);
    }
    grads.get_mut(&bn_name)?.add_assign(&gwb)?;
    grads.get_mut(&pw_name)?.add_assign(&gwp)?;
    grads.accumulate_wtconv(&node.name, &gwt)?;
    Ok(g_act)
}

/// Splits a concatenated input gradient back onto its source nodes at `stage`.
fn route(
    graph: &LayerGraph,
    inputs: &[usize],
    stage: usize,
    g_in: Vec<Tensor>,
    gfeat: &mut HashMap<(usize, usize), Vec<Tensor>>,
) -> Result<()> {
    let counts: Vec<usize> = inputs.iter().map(|&i| graph.nodes[i].out_channels).collect();
    for (b, g) in g_in.iter().enumerate() {
        let parts = split_channels(g, &counts)?;
        for (&src, part) in inputs.iter().zip(parts) {
            let slot = gfeat.entry((src, stage)).or_default();
            if slot.len() <= b {
                slot.push(part);
            } else {
                slot[b].add_assign(&part)?;
            }
        }
    }
    Ok(())
}

/// Folds gradients of pooled copies back down to the node's own stage.
fn collect_node_grad(
    cfg: &NetworkConfig,
    node: &Node,
    last: usize,
    gfeat: &mut HashMap<(usize, usize), Vec<Tensor>>,
    bsz: usize,
) -> Result<Vec<Tensor>> {
    for s in (node.stage + 1..=last).rev() {
        if let Some(g) = gfeat.remove(&(node.id, s)) {
            let [d, h, w] = cfg.stage_extent(s - 1);
            let padded = [d.div_ceil(2) * 2, h.div_ceil(2) * 2, w.div_ceil(2) * 2];
            let down = g
                .iter()
                .map(|t| avg_pool_backward(t, &POOL, &padded)?.crop(&[d, h, w]))
                .collect::<Result<Vec<_>>>()?;
            let slot = gfeat.entry((node.id, s - 1)).or_default();
            if slot.is_empty() {
                *slot = down;
            } else {
                for (a, b) in slot.iter_mut().zip(&down) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    match gfeat.remove(&(node.id, node.stage)) {
        Some(g) => Ok(g),
        None => {
            let e = cfg.stage_extent(node.stage);
            Ok(vec![Tensor::zeros(&[node.out_channels, e[0], e[1], e[2]]); bsz])
        }
    }
}

/// Blends the batch statistics of a training-mode pass into the running
/// estimates, `r <- (1 - momentum) r + momentum * batch` with the unbiased
/// batch variance.
pub fn update_running_stats(
    params: &mut NetworkParams,
    cache: &ForwardCache,
    momentum: f64,
) -> Result<()> {
    let named = cache
        .graph
        .nodes
        .iter()
        .filter_map(|n| cache.nodes[n.id].bn.as_ref().map(|bn| (n.name.as_str(), bn)))
        .chain(cache.head.bn.as_ref().map(|bn| ("head", bn)));
    let updates: Vec<(String, String, Vec<f64>, Vec<f64>, usize)> = named
        .map(|(name, bn)| {
            let [_, _, rm, rv] = bn_names(name);
            (rm, rv, bn.mean.clone(), bn.var.clone(), bn.count)
        })
        .collect();
    for (rm, rv, mean, var, n) in updates {
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        let m = params.get_mut(&rm)?;
        m.data_mut()
            .iter_mut()
            .zip(&mean)
            .for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
        let v = params.get_mut(&rv)?;
        v.data_mut()
            .iter_mut()
            .zip(&var)
            .for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b * unbias);
    }
    Ok(())
}
