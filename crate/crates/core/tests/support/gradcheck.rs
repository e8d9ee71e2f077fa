//! Central finite differences against reverse-mode gradients.
//!
//! A coordinate whose `±h` perturbation flips the sign of any ReLU input is
//! not differentiable on that interval, so the difference quotient says
//! nothing about the gradient there. Those coordinates are counted and
//! skipped rather than compared.

use nowcast_core::graph::{Graph, NodeId, NodeKind, ParameterSet};
use nowcast_core::Tensor;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn merge(&mut self, o: GradReport) {
        self.checked += o.checked;
        self.skipped_kinks += o.skipped_kinks;
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_err < REL_TOL && self.skipped_kinks * 20 <= self.checked + self.skipped_kinks
    }
}

pub fn rel_err(autodiff: f64, fd: f64) -> f64 {
    (autodiff - fd).abs() / (fd.abs() + 1e-8)
}

struct Probe<'a> {
    graph: &'a Graph,
    loss: NodeId,
    relu_inputs: Vec<NodeId>,
}

impl Probe<'_> {
    fn eval(&self, params: &ParameterSet, feeds: &[(NodeId, &Tensor)]) -> (f64, Vec<bool>) {
        let acts = self.graph.forward(params, feeds).expect("forward");
        let loss = acts.get(self.loss).unwrap().item();
        let signs = self
            .relu_inputs
            .iter()
            .flat_map(|&n| acts.get(n).unwrap().data().iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            .collect();
        (loss, signs)
    }
}

fn probe(graph: &Graph, loss: NodeId) -> Probe<'_> {
    let relu_inputs = graph
        .nodes()
        .iter()
        .filter(|n| n.kind == NodeKind::Relu)
        .map(|n| n.inputs[0])
        .collect();
    Probe { graph, loss, relu_inputs }
}

/// Check parameter gradients, probing every `stride`-th flat coordinate.
pub fn check_params(
    graph: &Graph,
    params: &ParameterSet,
    feeds: &[(NodeId, &Tensor)],
    loss: NodeId,
    stride: usize,
) -> GradReport {
    let p = probe(graph, loss);
    let acts = graph.forward(params, feeds).expect("forward");
    let grads = graph.backward(params, &acts, loss).expect("backward");
    let (_, base_signs) = p.eval(params, feeds);
    let mut report = GradReport::default();
    let mut work = params.clone();
    let mut counter = 0usize;
    for pid in 0..params.len() {
        for c in 0..params.get(pid).len() {
            counter += 1;
            if stride > 1 && !counter.is_multiple_of(stride) {
                continue;
            }
            let orig = params.get(pid).data()[c];
            work.get_mut(pid).data_mut()[c] = orig + STEP;
            let (fp, sp) = p.eval(&work, feeds);
            work.get_mut(pid).data_mut()[c] = orig - STEP;
            let (fm, sm) = p.eval(&work, feeds);
            work.get_mut(pid).data_mut()[c] = orig;
            if sp != base_signs || sm != base_signs {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * STEP);
            let ad = grads.entries[pid].1.data()[c];
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err(ad, fd));
        }
    }
    report
}

/// Check gradients with respect to the tensor fed to `input`.
pub fn check_input(
    graph: &Graph,
    params: &ParameterSet,
    feeds: &[(NodeId, &Tensor)],
    loss: NodeId,
    input: NodeId,
) -> GradReport {
    let p = probe(graph, loss);
    let acts = graph.forward(params, feeds).expect("forward");
    let (_, in_grads) = graph.backward_with_inputs(params, &acts, loss).expect("backward");
    let g = in_grads.get(&input).expect("input gradient").clone();
    let (_, base_signs) = p.eval(params, feeds);
    let base = feeds.iter().find(|(id, _)| *id == input).unwrap().1.clone();
    let mut report = GradReport::default();
    let with = |t: Tensor| -> Vec<(NodeId, Tensor)> {
        feeds.iter().map(|(id, f)| (*id, if *id == input { t.clone() } else { (*f).clone() })).collect()
    };
    for c in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[c] += STEP;
        let mut minus = base.clone();
        minus.data_mut()[c] -= STEP;
        let fp_v = with(plus);
        let fm_v = with(minus);
        let fp_feeds: Vec<(NodeId, &Tensor)> = fp_v.iter().map(|(i, t)| (*i, t)).collect();
        let fm_feeds: Vec<(NodeId, &Tensor)> = fm_v.iter().map(|(i, t)| (*i, t)).collect();
        let (fp, sp) = p.eval(params, &fp_feeds);
        let (fm, sm) = p.eval(params, &fm_feeds);
        if sp != base_signs || sm != base_signs {
            report.skipped_kinks += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * STEP);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err(g.data()[c], fd));
    }
    report
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

struct Case {
    graph: Graph,
    params: ParameterSet,
    feeds: Vec<(NodeId, Tensor)>,
    loss: NodeId,
}

impl Case {
    fn report(&self) -> GradReport {
        let feeds: Vec<(NodeId, &Tensor)> = self.feeds.iter().map(|(i, t)| (*i, t)).collect();
        let mut r = check_params(&self.graph, &self.params, &feeds, self.loss, 1);
        for (id, _) in &self.feeds {
            r.merge(check_input(&self.graph, &self.params, &feeds, self.loss, *id));
        }
        r
    }
}

/// Builds `x -> conv(k, s) -> bias -> <kind under test> -> mse(truth)`.
fn case(seed: u64, hw: usize, cin: usize, k: usize, s: usize, f: impl FnOnce(&mut Graph, &mut ParameterSet, NodeId) -> (NodeId, Vec<usize>)) -> Case {
    let mut g = Graph::new();
    let mut params = ParameterSet::new();
    let x = g.input("x");
    let cout = 3;
    let w = params.push("w", random(&[k, k, cin, cout], seed));
    let b = params.push("b", random(&[cout], seed + 1));
    let c = g.conv("conv", x, w, k, s);
    let c = g.bias("bias", c, b);
    let (out, out_shape) = f(&mut g, &mut params, c);
    let y = g.input("y");
    let crop = out_shape[1].min(out_shape[2]).min(3);
    let loss = g.mse("loss", out, y, crop, crop);
    let xt = random(&[2, hw, hw, cin], seed + 2);
    let yt = random(&out_shape, seed + 3);
    Case { graph: g, params, feeds: vec![(x, xt), (y, yt)], loss }
}

/// One gradient report per node kind, each on a small randomized graph.
pub fn node_kind_suite() -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    out.push(("conv2d_valid k3 s1 + linear_bias + mse_cropped", case(10, 6, 2, 3, 1, |_, _, c| (c, vec![2, 4, 4, 3])).report()));
    out.push(("conv2d_valid k2 s2", case(20, 8, 2, 2, 2, |_, _, c| (c, vec![2, 4, 4, 3])).report()));
    out.push((
        "relu",
        case(30, 6, 2, 3, 1, |g, _, c| (g.relu("relu", c), vec![2, 4, 4, 3])).report(),
    ));
    out.push((
        "upsample_nearest",
        case(40, 5, 2, 3, 1, |g, _, c| (g.upsample("up", c, 2), vec![2, 6, 6, 3])).report(),
    ));
    out.push((
        "center_crop (asymmetric)",
        case(50, 7, 2, 3, 1, |g, _, c| (g.crop("crop", c, 4, 3), vec![2, 4, 3, 3])).report(),
    ));
    out.push((
        "center_crop like",
        case(55, 8, 2, 3, 1, |g, params, c| {
            let w2 = params.push("w2", random(&[3, 3, 3, 3], 56));
            let small = g.conv("conv2", c, w2, 3, 1);
            (g.crop_like("crop_like", c, small), vec![2, 4, 4, 3])
        })
        .report(),
    ));
    out.push((
        "concat_channels",
        case(60, 6, 2, 3, 1, |g, params, c| {
            let w2 = params.push("w2", random(&[1, 1, 3, 2], 61));
            let other = g.conv("conv2", c, w2, 1, 1);
            (g.concat("cat", vec![c, other]), vec![2, 4, 4, 5])
        })
        .report(),
    ));
    out.push((
        "avgpool",
        case(70, 6, 2, 3, 1, |g, _, c| (g.avgpool("pool", c, 2), vec![2, 2, 2, 3])).report(),
    ));
    out.push((
        "sum_scalar",
        case(80, 6, 2, 3, 1, |g, params, c| {
            // "inner" becomes a second loss term, summed in by `with_sum`.
            let w2 = params.push("w2", random(&[1, 1, 3, 3], 81));
            let d = g.conv("conv2", c, w2, 1, 1);
            g.mse("inner", d, c, 2, 2);
            (d, vec![2, 4, 4, 3])
        })
        .with_sum(),
    ));
    out
}

impl Case {
    /// Replace the loss by `loss + inner` (the graph's "inner" node).
    fn with_sum(mut self) -> GradReport {
        let inner = self.graph.find("inner").expect("inner loss");
        self.loss = self.graph.sum("total", vec![self.loss, inner]);
        self.report()
    }
}

/// End-to-end check through the full model graph.
pub fn model_report(config: &nowcast_core::ModelConfig, seed: u64, stride: usize) -> GradReport {
    let (model, params) = nowcast_core::build_model(config, seed).expect("build");
    let g = model.graph();
    let (x, y, loss) = (g.find("x").unwrap(), g.find("y").unwrap(), g.find("loss").unwrap());
    let p = config.patch;
    let xt = random(&[2, p, p, config.input_frames], seed + 1);
    let yt = random(&[2, p, p, config.output_frames], seed + 2);
    // Non-zero biases so bias gradients are exercised through every layer.
    let mut params = params;
    for (i, t) in params.tensors_mut().enumerate() {
        if t.shape().len() == 1 {
            *t = random(t.shape(), 1000 + i as u64);
            t.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
    }
    check_params(g, &params, &[(x, &xt), (y, &yt)], loss, stride)
}
