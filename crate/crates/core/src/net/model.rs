use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::plan::{infer_shapes, ShapePlan};
use crate::error::{Error, Result};
use crate::graph::{Graph, GradientSet, NodeId, ParameterSet};
use crate::tensor::{self, Tensor};

/// The nowcast network: an immutable graph plus the node ids that matter.
/// Parameters are kept outside so replicas can share one model.
#[derive(Debug, Clone)]
pub struct NowcastModel {
    config: ModelConfig,
    graph: Graph,
    x: NodeId,
    y: NodeId,
    /// `(level, node)` coarsest first; last is the 1 km output.
    heads: Vec<(usize, NodeId)>,
    level_losses: Vec<NodeId>,
    loss: NodeId,
}

/// One prediction tensor per head, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutput {
    pub levels: Vec<(usize, Tensor)>,
}

impl MultiScaleOutput {
    /// The 1 km forecast.
    pub fn final_output(&self) -> &Tensor {
        &self.levels.last().expect("at least one head").1
    }

    pub fn level(&self, level: usize) -> Option<&Tensor> {
        self.levels.iter().find(|(l, _)| *l == level).map(|(_, t)| t)
    }
}

struct Builder<'a> {
    g: Graph,
    params: ParameterSet,
    rng: ChaCha8Rng,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    /// Conv + bias, with fan-in scaled uniform weights and zero bias.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, x: NodeId, cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> NodeId {
        let fan_in = (k * k * cin) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[k, k, cin, cout], |_| rng.gen_range(-bound..bound));
        let wid = self.params.push(format!("{name}.w"), w);
        let bid = self.params.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        let c = self.g.conv(format!("{name}.conv"), x, wid, k, stride);
        let b = self.g.bias(format!("{name}.bias"), c, bid);
        if relu {
            self.g.relu(name.to_string(), b)
        } else {
            b
        }
    }
}

/// Build the graph and freshly initialised parameters. Parameter order is
/// fixed by config traversal, and values depend only on `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(NowcastModel, ParameterSet)> {
    let plan = infer_shapes(config, config.patch, config.patch)?;
    plan.check_loss_crops(config)?;

    let mut b = Builder { g: Graph::new(), params: ParameterSet::new(), rng: ChaCha8Rng::seed_from_u64(seed), cfg: config };
    let k = config.kernel;
    let x = b.g.input("x");
    let y = b.g.input("y");

    let mut n = x;
    let mut cin = config.input_frames;
    let mut skips = Vec::with_capacity(config.levels.len());
    for (l, stage) in config.levels.iter().enumerate() {
        for i in 0..stage.conv_count {
            n = b.conv(&format!("enc{l}_conv{i}"), n, cin, stage.channels, k, 1, true);
            cin = stage.channels;
        }
        skips.push((n, cin));
        let next = config.levels.get(l + 1).unwrap_or(&config.bottleneck).channels;
        n = b.conv(&format!("down{l}"), n, cin, next, b.cfg.down_kernel, b.cfg.down_stride, true);
        cin = next;
    }
    for i in 0..config.bottleneck.conv_count {
        n = b.conv(&format!("bottleneck_conv{i}"), n, cin, config.bottleneck.channels, k, 1, true);
        cin = config.bottleneck.channels;
    }

    let bl = config.bottleneck_level();
    let factor = config.down_stride;
    let mut features = vec![(0, 0); bl + 1];
    features[bl] = (n, cin);
    for l in (0..bl).rev() {
        let up = b.g.upsample(format!("dec{l}_up"), n, factor);
        let (skip, skip_c) = skips[l];
        let cropped = b.g.crop_like(format!("dec{l}_skip"), skip, up);
        let cat = b.g.concat(format!("dec{l}_cat"), vec![up, cropped]);
        let out_c = config.decoder_channels[bl - 1 - l];
        n = b.conv(&format!("dec{l}_conv"), cat, cin + skip_c, out_c, k, 1, true);
        cin = out_c;
        features[l] = (n, cin);
    }

    let frames = config.output_frames;
    let mut heads = Vec::new();
    let mut prev: Option<NodeId> = None;
    for l in (1..=config.coarsest_head_level).rev() {
        let (feat, feat_c) = features[l];
        let (inp, inp_c) = match prev {
            None => (feat, feat_c),
            Some(p) => {
                let up = b.g.upsample(format!("head{l}_up"), p, factor);
                let cropped = b.g.crop_like(format!("head{l}_crop"), up, feat);
                (b.g.concat(format!("head{l}_cat"), vec![feat, cropped]), feat_c + frames)
            }
        };
        let h = b.conv(&format!("head{l}"), inp, inp_c, frames, config.head_kernel, 1, false);
        heads.push((l, h));
        prev = Some(h);
    }
    let (feat, feat_c) = features[0];
    let (mut n, mut cin) = match prev {
        None => (feat, feat_c),
        Some(p) => {
            let up = b.g.upsample("final_up", p, factor);
            let cropped = b.g.crop_like("final_crop", up, feat);
            (b.g.concat("final_cat", vec![feat, cropped]), feat_c + frames)
        }
    };
    let last = config.final_channels.len() - 1;
    for (i, &ch) in config.final_channels.iter().enumerate() {
        n = b.conv(&format!("final{i}"), n, cin, ch, k, 1, i != last);
        cin = ch;
    }
    heads.push((0, n));

    // Loss: each head against truth cropped to the loss window, then pooled
    // to the head's resolution, so every level sees the same physical square.
    let crop_km = config.loss_crop_km;
    let y_crop = b.g.crop("y_loss_window", y, crop_km, crop_km);
    let mut level_losses = Vec::new();
    for &(l, head) in &heads {
        let truth = if l == 0 { y_crop } else { b.g.avgpool(format!("y_pool{l}"), y_crop, 1 << l) };
        let c = crop_km >> l;
        level_losses.push(b.g.mse(format!("loss{l}"), head, truth, c, c));
    }
    let loss = b.g.sum("loss", level_losses.clone());

    let Builder { g, params, .. } = b;
    Ok((NowcastModel { config: config.clone(), graph: g, x, y, heads, level_losses, loss }, params))
}

impl NowcastModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn plan(&self, h: usize, w: usize) -> Result<ShapePlan> {
        infer_shapes(&self.config, h, w)
    }

    fn check_input(&self, x: &Tensor) -> Result<ShapePlan> {
        let (_, h, w, c) = x.dims4()?;
        if c != self.config.input_frames {
            return Err(Error::shape("x", format!("expected {} channels, got {c}", self.config.input_frames)));
        }
        self.plan(h, w)
    }

    /// Forward pass returning every head.
    pub fn forward(&self, params: &ParameterSet, x: &Tensor) -> Result<MultiScaleOutput> {
        self.check_input(x)?;
        let outs: Vec<NodeId> = self.heads.iter().map(|&(_, n)| n).collect();
        let mut acts = self.graph.forward_inference(params, &[(self.x, x)], &outs)?;
        let levels = self
            .heads
            .iter()
            .map(|&(l, n)| (l, acts.take(n).expect("head evaluated")))
            .collect();
        Ok(MultiScaleOutput { levels })
    }

    /// Forward pass returning only the 1 km output.
    pub fn forward_final(&self, params: &ParameterSet, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let out = self.heads.last().unwrap().1;
        let mut acts = self.graph.forward_inference(params, &[(self.x, x)], &[out])?;
        Ok(acts.take(out).expect("output evaluated"))
    }

    /// Batch-mean multi-scale loss.
    pub fn loss(&self, params: &ParameterSet, x: &Tensor, y: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let mut acts = self.graph.forward_inference(params, &[(self.x, x), (self.y, y)], &[self.loss])?;
        Ok(acts.take(self.loss).unwrap().item())
    }

    /// Batch-mean loss and its gradient.
    pub fn loss_and_grad(&self, params: &ParameterSet, x: &Tensor, y: &Tensor) -> Result<(f64, GradientSet)> {
        self.check_input(x)?;
        let acts = self.graph.forward(params, &[(self.x, x), (self.y, y)])?;
        let loss = acts.get(self.loss).unwrap().item();
        let grads = self.graph.backward(params, &acts, self.loss)?;
        Ok((loss, grads))
    }

    /// Per-level losses, coarsest first, as computed by the graph.
    pub fn level_losses(&self, params: &ParameterSet, x: &Tensor, y: &Tensor) -> Result<Vec<(usize, f64)>> {
        self.check_input(x)?;
        let acts = self.graph.forward_inference(params, &[(self.x, x), (self.y, y)], &self.level_losses)?;
        Ok(self
            .heads
            .iter()
            .zip(&self.level_losses)
            .map(|(&(l, _), &n)| (l, acts.get(n).unwrap().item()))
            .collect())
    }
}

/// Equal-weight sum over heads of the MSE against pooled truth, each
/// restricted to the central loss window.
pub fn multiscale_loss(outputs: &MultiScaleOutput, y: &Tensor, config: &ModelConfig) -> Result<f64> {
    let crop = config.loss_crop_km;
    let window = tensor::center_crop(y, crop, crop)?;
    let mut total = 0.0;
    for (l, pred) in &outputs.levels {
        let truth = if *l == 0 { window.clone() } else { tensor::avgpool(&window, 1 << l)? };
        let c = crop >> l;
        total += tensor::mse_cropped(pred, &truth, c, c)?;
    }
    Ok(total)
}
