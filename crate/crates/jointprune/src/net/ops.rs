use crate::cost::{penalized_error, ConstraintSpec, CostModel, LatencyTable};
use crate::error::{Error, Result};
use crate::estimator::GaussianPolicy;
use crate::net::data::{Batch, Dataset};
use crate::net::store::{LayerWeights, SharedWeightStore, Tensor};
use crate::rng::DetRng;
use crate::space::{
    active_layers, clamp, round_to_config, ArchitectureConfig, ArchitectureSpace, LayerKind,
    LayerSpec, PruningVector,
};

/// Logical view into the store selecting the first `c_out` output slices and
/// first `c_in` input slices of every active layer. Training steps through the
/// view touch only these slices.
#[derive(Debug, Clone)]
pub struct CropView {
    pub active: Vec<usize>,
    /// Cropped out-channels per layer (indexed by layer, meaningful for active ones).
    pub out_ch: Vec<usize>,
    /// Resolved in-channels per layer, chained through active layers only.
    pub in_ch: Vec<usize>,
    pub spatial: usize,
}

pub fn crop_view(
    store: &SharedWeightStore,
    config: &ArchitectureConfig,
    space: &ArchitectureSpace,
) -> Result<CropView> {
    store.matches_space(space)?;
    space.validate_config(config)?;
    let active = active_layers(config, space);
    let mut out_ch = vec![0usize; space.layers.len()];
    let mut in_ch = vec![0usize; space.layers.len()];
    let mut prev = space.input_channels;
    for &l in &active {
        let c = config.out_channels[l];
        match space.layers[l].kind {
            LayerKind::DepthwiseConv => {
                if prev != c {
                    return Err(Error::InvalidArgument(format!(
                        "layer {l}: depthwise needs in == out channels, got {prev} vs {c}"
                    )));
                }
                in_ch[l] = c;
            }
            _ => in_ch[l] = prev,
        }
        out_ch[l] = c;
        prev = c;
    }
    Ok(CropView {
        active,
        out_ch,
        in_ch,
        spatial: config.spatial,
    })
}

/// Area-average pool a batch from its native resolution down to
/// `spatial x spatial`; non-integer ratios use fractional-area weighting.
pub fn downsample(batch: &Batch, spatial: usize) -> Result<Batch> {
    if spatial < 1 {
        return Err(Error::InvalidArgument("spatial must be >= 1".into()));
    }
    let src = &batch.inputs;
    if spatial > src.h {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {} -> {}",
            src.h, spatial
        )));
    }
    if spatial == src.h && spatial == src.w {
        return Ok(batch.clone());
    }
    let row_w = axis_weights(src.h, spatial);
    let col_w = axis_weights(src.w, spatial);
    let mut out = Tensor::zeros(src.b, src.c, spatial, spatial);
    for b in 0..src.b {
        for c in 0..src.c {
            for (oy, rws) in row_w.iter().enumerate() {
                for (ox, cws) in col_w.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(iy, wy) in rws {
                        for &(ix, wx) in cws {
                            acc += wy * wx * src.get(b, c, iy, ix);
                        }
                    }
                    let idx = out.idx(b, c, oy, ox);
                    out.data[idx] = acc;
                }
            }
        }
    }
    Ok(Batch {
        inputs: out,
        labels: batch.labels.clone(),
    })
}

/// Per-output-index (input index, weight) pairs; weights sum to 1.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let r = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let start = o as f64 * r;
            let end = (o + 1) as f64 * r;
            let mut pairs = Vec::new();
            let mut i = start.floor() as usize;
            while (i as f64) < end && i < src {
                let overlap = end.min((i + 1) as f64) - start.max(i as f64);
                if overlap > 0.0 {
                    pairs.push((i, overlap / r));
                }
                i += 1;
            }
            pairs
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum StageOp {
    Conv(usize),
    Depthwise(usize),
    Gap,
    Dense(usize),
}

pub struct Stage {
    pub op: StageOp,
    pub out: Tensor,
}

pub struct ForwardPass {
    pub stages: Vec<Stage>,
    /// Softmax probabilities, row-major (batch x classes).
    pub probs: Vec<f64>,
    pub num_classes: usize,
    pub loss: f64,
}

fn check_finite(t: &Tensor, layer: usize) -> Result<()> {
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation { layer });
    }
    Ok(())
}

fn conv_forward(
    lw: &LayerWeights,
    spec: &LayerSpec,
    x: &Tensor,
    c_in: usize,
    c_out: usize,
) -> Tensor {
    let k = spec.kernel;
    let pad = k / 2;
    let stride = spec.stride;
    let h_out = x.h / stride;
    let w_out = x.w / stride;
    let mut out = Tensor::zeros(x.b, c_out, h_out, w_out);
    for b in 0..x.b {
        for o in 0..c_out {
            let plane = out.idx(b, o, 0, 0);
            for p in 0..h_out * w_out {
                out.data[plane + p] = lw.b[o];
            }
            let in_range = if matches!(spec.kind, LayerKind::DepthwiseConv) {
                o..o + 1
            } else {
                0..c_in
            };
            for i in in_range {
                let wi = if matches!(spec.kind, LayerKind::DepthwiseConv) { 0 } else { i };
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = lw.w[lw.w_idx(o, wi, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h_out {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let row_in = x.idx(b, i, iy as usize, 0);
                            let row_out = plane + y * w_out;
                            for xo in 0..w_out {
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                out.data[row_out + xo] += wv * x.data[row_in + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    if spec.has_relu {
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

fn gap_forward(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.b, x.c, 1, 1);
    let inv = 1.0 / (x.h * x.w) as f64;
    for b in 0..x.b {
        for c in 0..x.c {
            let base = x.idx(b, c, 0, 0);
            let sum: f64 = x.data[base..base + x.h * x.w].iter().sum();
            let idx = out.idx(b, c, 0, 0);
            out.data[idx] = sum * inv;
        }
    }
    out
}

fn dense_forward(lw: &LayerWeights, spec: &LayerSpec, x: &Tensor, c_in: usize, c_out: usize) -> Tensor {
    let mut out = Tensor::zeros(x.b, c_out, 1, 1);
    for b in 0..x.b {
        for o in 0..c_out {
            let mut acc = lw.b[o];
            for i in 0..c_in {
                acc += lw.w[lw.w_idx(o, i, 0, 0)] * x.get(b, i, 0, 0);
            }
            let idx = out.idx(b, o, 0, 0);
            out.data[idx] = acc;
        }
    }
    if spec.has_relu {
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

/// Forward pass over active layers: conv blocks, global average pool before
/// the classifier, then mean softmax cross-entropy (stabilized by per-row
/// max subtraction).
pub fn forward(
    store: &SharedWeightStore,
    space: &ArchitectureSpace,
    view: &CropView,
    batch: &Batch,
) -> Result<ForwardPass> {
    if batch.inputs.h != view.spatial || batch.inputs.w != view.spatial {
        return Err(Error::InvalidArgument(format!(
            "batch resolution {}x{} does not match config spatial {}",
            batch.inputs.h, batch.inputs.w, view.spatial
        )));
    }
    if batch.inputs.c != space.input_channels {
        return Err(Error::DimensionMismatch {
            expected: space.input_channels,
            got: batch.inputs.c,
        });
    }
    let mut stages: Vec<Stage> = Vec::new();
    for &l in &view.active {
        let spec = &space.layers[l];
        let lw = &store.layers[l];
        let x = stages.last().map(|s| &s.out).unwrap_or(&batch.inputs);
        match spec.kind {
            LayerKind::Conv | LayerKind::DepthwiseConv => {
                let out = conv_forward(lw, spec, x, view.in_ch[l], view.out_ch[l]);
                check_finite(&out, l)?;
                let op = if matches!(spec.kind, LayerKind::Conv) {
                    StageOp::Conv(l)
                } else {
                    StageOp::Depthwise(l)
                };
                stages.push(Stage { op, out });
            }
            LayerKind::Dense => {
                let needs_pool = {
                    let cur = stages.last().map(|s| &s.out).unwrap_or(&batch.inputs);
                    cur.h * cur.w > 1
                };
                if needs_pool {
                    let cur = stages.last().map(|s| &s.out).unwrap_or(&batch.inputs);
                    let pooled = gap_forward(cur);
                    stages.push(Stage {
                        op: StageOp::Gap,
                        out: pooled,
                    });
                }
                let x = stages.last().map(|s| &s.out).unwrap_or(&batch.inputs);
                let out = dense_forward(lw, spec, x, view.in_ch[l], view.out_ch[l]);
                check_finite(&out, l)?;
                stages.push(Stage {
                    op: StageOp::Dense(l),
                    out,
                });
            }
        }
    }
    let logits_tensor = stages.last().map(|s| &s.out).unwrap_or(&batch.inputs);
    if logits_tensor.h * logits_tensor.w != 1 {
        let pooled = gap_forward(logits_tensor);
        stages.push(Stage {
            op: StageOp::Gap,
            out: pooled,
        });
    }
    let logits = &stages.last().unwrap().out;
    let num_classes = logits.c;
    let bsz = logits.b;
    let mut probs = vec![0.0; bsz * num_classes];
    let mut loss = 0.0;
    for b in 0..bsz {
        let row: Vec<f64> = (0..num_classes).map(|c| logits.get(b, c, 0, 0)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for c in 0..num_classes {
            probs[b * num_classes + c] = exps[c] / sum;
        }
        let label = batch.labels[b];
        if label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        loss -= (exps[label] / sum).ln();
    }
    loss /= bsz as f64;
    Ok(ForwardPass {
        stages,
        probs,
        num_classes,
        loss,
    })
}

/// Per-layer weight and bias gradients at maximal shape; entries outside the
/// view are zero.
pub struct Grads {
    pub per_layer: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn gradients(
    store: &SharedWeightStore,
    space: &ArchitectureSpace,
    view: &CropView,
    batch: &Batch,
    pass: &ForwardPass,
) -> Result<Grads> {
    let mut per_layer: Vec<(Vec<f64>, Vec<f64>)> = store
        .layers
        .iter()
        .map(|lw| (vec![0.0; lw.w.len()], vec![0.0; lw.b.len()]))
        .collect();

    // d loss / d logits for mean softmax cross-entropy.
    let bsz = batch.labels.len();
    let c_cls = pass.num_classes;
    let last = pass.stages.last().unwrap();
    let mut grad = Tensor::zeros(last.out.b, last.out.c, 1, 1);
    for b in 0..bsz {
        for c in 0..c_cls {
            let mut g = pass.probs[b * c_cls + c];
            if c == batch.labels[b] {
                g -= 1.0;
            }
            let idx = grad.idx(b, c, 0, 0);
            grad.data[idx] = g / bsz as f64;
        }
    }

    for si in (0..pass.stages.len()).rev() {
        let stage = &pass.stages[si];
        let input = if si == 0 {
            &batch.inputs
        } else {
            &pass.stages[si - 1].out
        };
        grad = match stage.op {
            StageOp::Gap => {
                let mut gin = Tensor::zeros(input.b, input.c, input.h, input.w);
                let inv = 1.0 / (input.h * input.w) as f64;
                for b in 0..input.b {
                    for c in 0..input.c {
                        let g = grad.get(b, c, 0, 0) * inv;
                        let base = gin.idx(b, c, 0, 0);
                        for p in 0..input.h * input.w {
                            gin.data[base + p] = g;
                        }
                    }
                }
                gin
            }
            StageOp::Dense(l) => {
                let spec = &space.layers[l];
                let lw = &store.layers[l];
                let mut gout = grad;
                if spec.has_relu {
                    relu_mask(&mut gout, &stage.out);
                }
                let (dw, db) = &mut per_layer[l];
                let mut gin = Tensor::zeros(input.b, input.c, 1, 1);
                for b in 0..input.b {
                    for o in 0..view.out_ch[l] {
                        let g = gout.get(b, o, 0, 0);
                        db[o] += g;
                        for i in 0..view.in_ch[l] {
                            dw[lw.w_idx(o, i, 0, 0)] += g * input.get(b, i, 0, 0);
                            let idx = gin.idx(b, i, 0, 0);
                            gin.data[idx] += g * lw.w[lw.w_idx(o, i, 0, 0)];
                        }
                    }
                }
                gin
            }
            StageOp::Conv(l) | StageOp::Depthwise(l) => {
                let spec = &space.layers[l];
                let lw = &store.layers[l];
                let mut gout = grad;
                if spec.has_relu {
                    relu_mask(&mut gout, &stage.out);
                }
                let depthwise = matches!(stage.op, StageOp::Depthwise(_));
                let (dw, db) = &mut per_layer[l];
                conv_backward(
                    lw,
                    spec,
                    input,
                    &gout,
                    view.in_ch[l],
                    view.out_ch[l],
                    depthwise,
                    dw,
                    db,
                )
            }
        };
    }

    for (l, (dw, db)) in per_layer.iter().enumerate() {
        if dw.iter().chain(db.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: l });
        }
    }
    Ok(Grads { per_layer })
}

fn relu_mask(grad: &mut Tensor, post: &Tensor) {
    for (g, &v) in grad.data.iter_mut().zip(&post.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    lw: &LayerWeights,
    spec: &LayerSpec,
    x: &Tensor,
    gout: &Tensor,
    c_in: usize,
    c_out: usize,
    depthwise: bool,
    dw: &mut [f64],
    db: &mut [f64],
) -> Tensor {
    let k = spec.kernel;
    let pad = k / 2;
    let stride = spec.stride;
    let (h_out, w_out) = (gout.h, gout.w);
    let mut gin = Tensor::zeros(x.b, x.c, x.h, x.w);
    for b in 0..x.b {
        for o in 0..c_out {
            let gplane = gout.idx(b, o, 0, 0);
            for p in 0..h_out * w_out {
                db[o] += gout.data[gplane + p];
            }
            let in_range = if depthwise { o..o + 1 } else { 0..c_in };
            for i in in_range {
                let wi = if depthwise { 0 } else { i };
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = lw.w_idx(o, wi, ky, kx);
                        let wv = lw.w[widx];
                        let mut dacc = 0.0;
                        for y in 0..h_out {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let row_in = x.idx(b, i, iy as usize, 0);
                            let row_g = gplane + y * w_out;
                            for xo in 0..w_out {
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let g = gout.data[row_g + xo];
                                dacc += g * x.data[row_in + ix as usize];
                                gin.data[row_in + ix as usize] += g * wv;
                            }
                        }
                        dw[widx] += dacc;
                    }
                }
            }
        }
    }
    gin
}

/// SGD-with-momentum hyperparameters for weight training.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    /// Applied to weights only, not biases.
    pub weight_decay: f64,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

/// Apply one SGD-with-momentum step to the slices covered by the view; every
/// other store entry (weights and momentum alike) is left untouched.
pub fn apply_sgd(
    store: &mut SharedWeightStore,
    space: &ArchitectureSpace,
    view: &CropView,
    grads: &Grads,
    hyper: &SgdHyper,
) {
    for &l in &view.active {
        let lw = &mut store.layers[l];
        let (dw, db) = &grads.per_layer[l];
        let kk = lw.kernel * lw.kernel;
        let in_span = match space.layers[l].kind {
            LayerKind::DepthwiseConv => 1,
            _ => view.in_ch[l],
        };
        for o in 0..view.out_ch[l] {
            for i in 0..in_span {
                let base = lw.w_idx(o, i, 0, 0);
                let span = match space.layers[l].kind {
                    LayerKind::Dense => 1,
                    _ => kk,
                };
                for idx in base..base + span {
                    let g = dw[idx] + hyper.weight_decay * lw.w[idx];
                    lw.mw[idx] = hyper.momentum * lw.mw[idx] + g;
                    lw.w[idx] -= hyper.lr * lw.mw[idx];
                }
            }
            lw.mb[o] = hyper.momentum * lw.mb[o] + db[o];
            lw.b[o] -= hyper.lr * lw.mb[o];
        }
    }
}

/// Forward + backward + SGD step through the cropped view.
pub fn backward_and_step(
    store: &mut SharedWeightStore,
    space: &ArchitectureSpace,
    view: &CropView,
    batch: &Batch,
    pass: &ForwardPass,
    hyper: &SgdHyper,
) -> Result<()> {
    let grads = gradients(store, space, view, batch, pass)?;
    apply_sgd(store, space, view, &grads, hyper);
    Ok(())
}

/// Inner weight-training loop: each iteration samples `v ~ N(mu, sigma)`,
/// clamps and rounds it, and trains the corresponding cropped subnetwork on
/// one random batch.
pub fn train_inner(
    store: &mut SharedWeightStore,
    space: &ArchitectureSpace,
    policy: &GaussianPolicy,
    data: &Dataset,
    iterations: usize,
    batch_size: usize,
    hyper: &SgdHyper,
    rng: &mut DetRng,
) -> Result<()> {
    if iterations < 1 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    for _ in 0..iterations {
        let noisy = PruningVector::new(
            policy
                .mu
                .entries
                .iter()
                .map(|&m| m + policy.sigma * rng.next_normal())
                .collect(),
        );
        let v = clamp(&noisy, space);
        let config = round_to_config(&v, space)?;
        let indices: Vec<usize> = (0..batch_size).map(|_| rng.next_below(data.len())).collect();
        let batch = downsample(&data.batch(&indices), config.spatial)?;
        let view = crop_view(store, &config, space)?;
        let pass = forward(store, space, &view, &batch)?;
        backward_and_step(store, space, &view, &batch, &pass, hyper)?;
    }
    Ok(())
}

/// Round a vector to its architecture, compute mean validation loss with
/// cropped weights and the resource cost, and fold in the constraint penalty.
/// Returns (loss, cost, penalized error).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_error(
    store: &SharedWeightStore,
    space: &ArchitectureSpace,
    v: &PruningVector,
    valset: &Dataset,
    subset: &[usize],
    constraint: &ConstraintSpec,
    cost_model: &CostModel,
    latency_table: Option<&LatencyTable>,
) -> Result<(f64, f64, f64)> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("empty validation subset".into()));
    }
    let config = round_to_config(&clamp(v, space), space)?;
    let view = crop_view(store, &config, space)?;
    let batch = downsample(&valset.batch(subset), config.spatial)?;
    let pass = forward(store, space, &view, &batch)?;
    let cost = cost_model.cost(&config, space, constraint, latency_table)?;
    Ok((pass.loss, cost, penalized_error(pass.loss, cost, constraint)))
}

/// Classification accuracy of a rounded config on a validation subset.
pub fn evaluate_accuracy(
    store: &SharedWeightStore,
    space: &ArchitectureSpace,
    config: &ArchitectureConfig,
    valset: &Dataset,
    subset: &[usize],
) -> Result<f64> {
    let view = crop_view(store, config, space)?;
    let batch = downsample(&valset.batch(subset), config.spatial)?;
    let pass = forward(store, space, &view, &batch)?;
    let c = pass.num_classes;
    let mut correct = 0usize;
    for (b, &label) in batch.labels.iter().enumerate() {
        let row = &pass.probs[b * c..(b + 1) * c];
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if arg == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.labels.len() as f64)
}

/// Copy the cropped slices into a standalone store whose space has exactly the
/// config's dimensions. Forwarding the result reproduces the cropped view.
pub fn materialize(
    store: &SharedWeightStore,
    space: &ArchitectureSpace,
    config: &ArchitectureConfig,
) -> Result<(SharedWeightStore, ArchitectureSpace, ArchitectureConfig)> {
    let view = crop_view(store, config, space)?;
    let mut layers = Vec::new();
    let mut specs = Vec::new();
    for (new_block, &l) in view.active.iter().enumerate() {
        let spec = &space.layers[l];
        let lw = &store.layers[l];
        let (c_out, c_in) = (view.out_ch[l], view.in_ch[l]);
        let in_dim = match spec.kind {
            LayerKind::DepthwiseConv => 1,
            _ => c_in,
        };
        let mut sub = LayerWeights {
            kind: spec.kind,
            out_dim: c_out,
            in_dim,
            kernel: spec.kernel,
            w: Vec::new(),
            b: lw.b[..c_out].to_vec(),
            mw: Vec::new(),
            mb: vec![0.0; c_out],
        };
        for o in 0..c_out {
            for i in 0..in_dim {
                match spec.kind {
                    LayerKind::Dense => sub.w.push(lw.w[lw.w_idx(o, i, 0, 0)]),
                    _ => {
                        for ky in 0..spec.kernel {
                            for kx in 0..spec.kernel {
                                sub.w.push(lw.w[lw.w_idx(o, i, ky, kx)]);
                            }
                        }
                    }
                }
            }
        }
        sub.mw = vec![0.0; sub.w.len()];
        layers.push(sub);
        specs.push(LayerSpec {
            kind: spec.kind,
            kernel: spec.kernel,
            stride: spec.stride,
            max_in_channels: c_in,
            max_out_channels: c_out,
            min_out_channels: c_out,
            has_relu: spec.has_relu,
            block_id: new_block,
        });
    }
    let sub_space = ArchitectureSpace {
        layers: specs,
        tie_groups: vec![],
        droppable_blocks: vec![],
        min_depth: 0,
        spatial_max: config.spatial,
        spatial_min: config.spatial,
        input_channels: space.input_channels,
    };
    sub_space.validate()?;
    let sub_config = ArchitectureConfig {
        out_channels: view.active.iter().map(|&l| view.out_ch[l]).collect(),
        spatial: config.spatial,
        depth: 0,
    };
    Ok((SharedWeightStore { layers }, sub_space, sub_config))
}
