//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built append-only, so node ids are already a topological
//! order. Graphs carry no tensor data: parameters live in a [`ParameterSet`]
//! and every forward pass produces a fresh [`Activations`] workspace, which is
//! what lets many workers share one graph read-only.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropTarget {
    Fixed(usize, usize),
    /// Crop to the spatial extent of another node (the second input).
    Like,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Input,
    /// Valid convolution; the node's parameter holds `[k, k, cin, cout]` weights.
    Conv2dValid { kernel: usize, stride: usize },
    UpsampleNearest { factor: usize },
    CenterCrop { target: CropTarget },
    ConcatChannels,
    Relu,
    /// Per-channel bias add; the node's parameter holds `[c]`.
    LinearBias,
    /// Scalar MSE over the central window of `(pred, truth)`.
    MseCropped { h: usize, w: usize },
    SumScalar,
    AvgPool { factor: usize },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub param: Option<ParamId>,
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn same_structure(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

/// One gradient tensor per parameter, in [`ParameterSet`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub entries: Vec<(ParamId, Tensor)>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        GradientSet {
            entries: params.iter().enumerate().map(|(i, (_, t))| (i, Tensor::zeros(t.shape()))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn same_structure(&self, other: &GradientSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ia, ta), (ib, tb))| ia == ib && ta.shape() == tb.shape())
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Elementwise `self += other`. Structures must match.
    pub fn add_assign(&mut self, other: &GradientSet) {
        debug_assert!(self.same_structure(other));
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
}

/// Values computed by one forward pass. Entries are `None` for nodes that were
/// released early in inference mode.
#[derive(Debug, Clone)]
pub struct Activations {
    values: Vec<Option<Tensor>>,
}

impl Activations {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id).and_then(|v| v.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.values.get_mut(id).and_then(|v| v.take())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    fn add(&mut self, name: impl Into<String>, kind: NodeKind, inputs: Vec<NodeId>, param: Option<ParamId>) -> NodeId {
        let id = self.nodes.len();
        for &i in &inputs {
            assert!(i < id, "node input {i} does not precede node {id}");
        }
        self.nodes.push(Node { name: name.into(), kind, inputs, param });
        id
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.add(name, NodeKind::Input, vec![], None)
    }

    pub fn conv(&mut self, name: impl Into<String>, x: NodeId, weights: ParamId, kernel: usize, stride: usize) -> NodeId {
        self.add(name, NodeKind::Conv2dValid { kernel, stride }, vec![x], Some(weights))
    }

    pub fn bias(&mut self, name: impl Into<String>, x: NodeId, bias: ParamId) -> NodeId {
        self.add(name, NodeKind::LinearBias, vec![x], Some(bias))
    }

    pub fn relu(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.add(name, NodeKind::Relu, vec![x], None)
    }

    pub fn upsample(&mut self, name: impl Into<String>, x: NodeId, factor: usize) -> NodeId {
        self.add(name, NodeKind::UpsampleNearest { factor }, vec![x], None)
    }

    pub fn crop(&mut self, name: impl Into<String>, x: NodeId, h: usize, w: usize) -> NodeId {
        self.add(name, NodeKind::CenterCrop { target: CropTarget::Fixed(h, w) }, vec![x], None)
    }

    pub fn crop_like(&mut self, name: impl Into<String>, x: NodeId, like: NodeId) -> NodeId {
        self.add(name, NodeKind::CenterCrop { target: CropTarget::Like }, vec![x, like], None)
    }

    pub fn concat(&mut self, name: impl Into<String>, parts: Vec<NodeId>) -> NodeId {
        self.add(name, NodeKind::ConcatChannels, parts, None)
    }

    pub fn avgpool(&mut self, name: impl Into<String>, x: NodeId, factor: usize) -> NodeId {
        self.add(name, NodeKind::AvgPool { factor }, vec![x], None)
    }

    pub fn mse(&mut self, name: impl Into<String>, pred: NodeId, truth: NodeId, h: usize, w: usize) -> NodeId {
        self.add(name, NodeKind::MseCropped { h, w }, vec![pred, truth], None)
    }

    pub fn sum(&mut self, name: impl Into<String>, parts: Vec<NodeId>) -> NodeId {
        self.add(name, NodeKind::SumScalar, parts, None)
    }

    /// Static shape inference from the shapes fed to input nodes.
    pub fn infer_shapes(&self, params: &ParameterSet, feeds: &HashMap<NodeId, Vec<usize>>) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&i| &shapes[i]).collect();
            let s = self.node_shape(id, node, &ins, params, feeds)?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    fn node_shape(
        &self,
        id: NodeId,
        node: &Node,
        ins: &[&Vec<usize>],
        params: &ParameterSet,
        feeds: &HashMap<NodeId, Vec<usize>>,
    ) -> Result<Vec<usize>> {
        let err = |msg: String| Error::shape(node.name.clone(), msg);
        let rank4 = |s: &Vec<usize>| -> Result<(usize, usize, usize, usize)> {
            match s[..] {
                [b, h, w, c] => Ok((b, h, w, c)),
                _ => Err(err(format!("expected rank-4 input, got {s:?}"))),
            }
        };
        let param = |pid: Option<ParamId>| -> Result<&Tensor> {
            let pid = pid.ok_or_else(|| err("missing parameter".into()))?;
            if pid >= params.len() {
                return Err(err(format!("parameter {pid} out of range")));
            }
            Ok(params.get(pid))
        };
        Ok(match &node.kind {
            NodeKind::Input => feeds.get(&id).cloned().ok_or_else(|| err("input not fed".into()))?,
            NodeKind::Conv2dValid { kernel, stride } => {
                let (b, h, w, c) = rank4(ins[0])?;
                let wt = param(node.param)?;
                let ws = wt.shape();
                if ws.len() != 4 || ws[0] != *kernel || ws[1] != *kernel || ws[2] != c {
                    return Err(err(format!("weights {ws:?} incompatible with input channels {c}")));
                }
                let oh = tensor::conv_output_extent(&node.name, h, *kernel, *stride)?;
                let ow = tensor::conv_output_extent(&node.name, w, *kernel, *stride)?;
                vec![b, oh, ow, ws[3]]
            }
            NodeKind::LinearBias => {
                let c = *ins[0].last().unwrap();
                let bt = param(node.param)?;
                if bt.shape() != [c] {
                    return Err(err(format!("bias {:?} vs channels {c}", bt.shape())));
                }
                ins[0].clone()
            }
            NodeKind::Relu => ins[0].clone(),
            NodeKind::UpsampleNearest { factor } => {
                let (b, h, w, c) = rank4(ins[0])?;
                vec![b, h * factor, w * factor, c]
            }
            NodeKind::AvgPool { factor } => {
                let (b, h, w, c) = rank4(ins[0])?;
                if *factor == 0 || h % factor != 0 || w % factor != 0 {
                    return Err(err(format!("{h}x{w} not divisible by {factor}")));
                }
                vec![b, h / factor, w / factor, c]
            }
            NodeKind::CenterCrop { target } => {
                let (b, h, w, c) = rank4(ins[0])?;
                let (th, tw) = match target {
                    CropTarget::Fixed(th, tw) => (*th, *tw),
                    CropTarget::Like => {
                        let r = ins.get(1).ok_or_else(|| err("crop_like needs a reference".into()))?;
                        let (_, rh, rw, _) = rank4(r)?;
                        (rh, rw)
                    }
                };
                if th > h || tw > w {
                    return Err(err(format!("cannot crop {h}x{w} to {th}x{tw}")));
                }
                vec![b, th, tw, c]
            }
            NodeKind::ConcatChannels => {
                let (b, h, w, _) = rank4(ins[0])?;
                let mut c = 0;
                for s in ins {
                    let (sb, sh, sw, sc) = rank4(s)?;
                    if (sb, sh, sw) != (b, h, w) {
                        return Err(err(format!("concat spatial mismatch {:?} vs {s:?}", ins[0])));
                    }
                    c += sc;
                }
                vec![b, h, w, c]
            }
            NodeKind::MseCropped { h, w } => {
                let (pb, ph, pw, pc) = rank4(ins[0])?;
                let (tb, th, tw, tc) = rank4(ins[1])?;
                if pb != tb || pc != tc {
                    return Err(err(format!("pred {:?} vs truth {:?}", ins[0], ins[1])));
                }
                if *h > ph.min(th) || *w > pw.min(tw) {
                    return Err(err(format!("loss crop {h}x{w} exceeds {ph}x{pw} / {th}x{tw}")));
                }
                vec![1]
            }
            NodeKind::SumScalar => {
                if ins.is_empty() || ins.iter().any(|s| s.iter().product::<usize>() != 1) {
                    return Err(err("sum_scalar needs scalar inputs".into()));
                }
                vec![1]
            }
        })
    }

    /// Evaluate every node, keeping all intermediate values for backward.
    pub fn forward(&self, params: &ParameterSet, feeds: &[(NodeId, &Tensor)]) -> Result<Activations> {
        self.run(params, feeds, None)
    }

    /// Evaluate only what `outputs` need and drop intermediates after their last use.
    pub fn forward_inference(
        &self,
        params: &ParameterSet,
        feeds: &[(NodeId, &Tensor)],
        outputs: &[NodeId],
    ) -> Result<Activations> {
        self.run(params, feeds, Some(outputs))
    }

    fn run(&self, params: &ParameterSet, feeds: &[(NodeId, &Tensor)], keep: Option<&[NodeId]>) -> Result<Activations> {
        let feed_shapes: HashMap<NodeId, Vec<usize>> = feeds.iter().map(|(id, t)| (*id, t.shape().to_vec())).collect();
        for (id, _) in feeds {
            if !matches!(self.nodes.get(*id).map(|n| &n.kind), Some(NodeKind::Input)) {
                return Err(Error::Graph(format!("node {id} fed but is not an input")));
            }
        }
        let shapes = self.infer_shapes_partial(params, &feed_shapes, keep)?;

        let needed = match keep {
            Some(outs) => self.ancestors(outs),
            None => vec![true; self.nodes.len()],
        };
        // Index of the last consumer of each node, for early release.
        let mut last_use = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if needed[id] {
                for &i in &node.inputs {
                    last_use[i] = Some(id);
                }
            }
        }
        let is_output = |id: NodeId| keep.is_none_or(|o| o.contains(&id));

        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if !needed[id] {
                continue;
            }
            let out = {
                let ins: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|&i| values[i].as_ref().expect("input evaluated"))
                    .collect();
                self.eval_node(id, node, &ins, params, feeds)?
            };
            if out.shape() != shapes[id].as_slice() {
                return Err(Error::Graph(format!(
                    "{}: produced {:?}, inferred {:?}",
                    node.name,
                    out.shape(),
                    shapes[id]
                )));
            }
            values[id] = Some(out);
            if keep.is_some() {
                for &i in &node.inputs {
                    if last_use[i] == Some(id) && !is_output(i) {
                        values[i] = None;
                    }
                }
            }
        }
        Ok(Activations { values })
    }

    fn infer_shapes_partial(
        &self,
        params: &ParameterSet,
        feeds: &HashMap<NodeId, Vec<usize>>,
        keep: Option<&[NodeId]>,
    ) -> Result<Vec<Vec<usize>>> {
        let needed = match keep {
            Some(outs) => self.ancestors(outs),
            None => vec![true; self.nodes.len()],
        };
        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if !needed[id] {
                continue;
            }
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&i| &shapes[i]).collect();
            shapes[id] = self.node_shape(id, node, &ins, params, feeds)?;
        }
        Ok(shapes)
    }

    fn ancestors(&self, outs: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for &o in outs {
            needed[o] = true;
        }
        for id in (0..self.nodes.len()).rev() {
            if needed[id] {
                for &i in &self.nodes[id].inputs {
                    needed[i] = true;
                }
            }
        }
        needed
    }

    fn eval_node(
        &self,
        id: NodeId,
        node: &Node,
        ins: &[&Tensor],
        params: &ParameterSet,
        feeds: &[(NodeId, &Tensor)],
    ) -> Result<Tensor> {
        Ok(match &node.kind {
            NodeKind::Input => {
                let t = feeds.iter().find(|(i, _)| *i == id).map(|(_, t)| *t);
                t.ok_or_else(|| Error::Graph(format!("input {} not fed", node.name)))?.clone()
            }
            NodeKind::Conv2dValid { stride, .. } => {
                tensor::conv2d_valid(ins[0], params.get(node.param.unwrap()), None, *stride)?
            }
            NodeKind::LinearBias => tensor::add_bias(ins[0], params.get(node.param.unwrap()))?,
            NodeKind::Relu => tensor::relu(ins[0]),
            NodeKind::UpsampleNearest { factor } => tensor::upsample_nearest(ins[0], *factor)?,
            NodeKind::AvgPool { factor } => tensor::avgpool(ins[0], *factor)?,
            NodeKind::CenterCrop { target } => {
                let (th, tw) = match target {
                    CropTarget::Fixed(h, w) => (*h, *w),
                    CropTarget::Like => {
                        let (_, h, w, _) = ins[1].dims4()?;
                        (h, w)
                    }
                };
                tensor::center_crop(ins[0], th, tw)?
            }
            NodeKind::ConcatChannels => tensor::concat_channels(ins)?,
            NodeKind::MseCropped { h, w } => Tensor::scalar(tensor::mse_cropped(ins[0], ins[1], *h, *w)?),
            NodeKind::SumScalar => Tensor::scalar(ins.iter().map(|t| t.item()).sum()),
        })
    }

    /// Gradients of scalar node `loss` with respect to every parameter.
    pub fn backward(&self, params: &ParameterSet, acts: &Activations, loss: NodeId) -> Result<GradientSet> {
        self.backward_impl(params, acts, loss, false).map(|(g, _)| g)
    }

    /// Like [`Graph::backward`], also returning gradients for every input node.
    pub fn backward_with_inputs(
        &self,
        params: &ParameterSet,
        acts: &Activations,
        loss: NodeId,
    ) -> Result<(GradientSet, HashMap<NodeId, Tensor>)> {
        self.backward_impl(params, acts, loss, true)
    }

    fn backward_impl(
        &self,
        params: &ParameterSet,
        acts: &Activations,
        loss: NodeId,
        input_grads: bool,
    ) -> Result<(GradientSet, HashMap<NodeId, Tensor>)> {
        let loss_val = acts
            .get(loss)
            .ok_or_else(|| Error::Graph("backward called before forward".into()))?;
        if !loss_val.is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, {} has shape {:?}",
                self.nodes[loss].name,
                loss_val.shape()
            )));
        }

        let mut requires = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            requires[id] = node.param.is_some()
                || (input_grads && node.kind == NodeKind::Input)
                || node.inputs.iter().any(|&i| requires[i]);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        let mut pgrads = GradientSet::zeros_like(params);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = |i: NodeId| -> Result<&Tensor> {
                acts.get(i).ok_or_else(|| Error::Graph(format!("activation of {} missing", self.nodes[i].name)))
            };
            let push = |grads: &mut Vec<Option<Tensor>>, i: NodeId, t: Tensor| {
                if !requires[i] {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.kind {
                NodeKind::Input => {
                    if input_grads {
                        grads[id] = Some(g);
                    }
                }
                NodeKind::Conv2dValid { stride, .. } => {
                    let pid = node.param.unwrap();
                    let x = node.inputs[0];
                    let (gx, gw) = tensor::conv2d_valid_backward(val(x)?, params.get(pid), &g, *stride, requires[x])?;
                    add_into(&mut pgrads.entries[pid].1, &gw);
                    if let Some(gx) = gx {
                        push(&mut grads, x, gx);
                    }
                }
                NodeKind::LinearBias => {
                    let pid = node.param.unwrap();
                    add_into(&mut pgrads.entries[pid].1, &tensor::add_bias_backward(&g));
                    push(&mut grads, node.inputs[0], g);
                }
                NodeKind::Relu => {
                    let x = node.inputs[0];
                    if requires[x] {
                        push(&mut grads, x, tensor::relu_backward(val(x)?, &g));
                    }
                }
                NodeKind::UpsampleNearest { factor } => {
                    let x = node.inputs[0];
                    if requires[x] {
                        push(&mut grads, x, tensor::upsample_nearest_backward(val(x)?.shape(), &g, *factor)?);
                    }
                }
                NodeKind::AvgPool { factor } => {
                    let x = node.inputs[0];
                    if requires[x] {
                        push(&mut grads, x, tensor::avgpool_backward(val(x)?.shape(), &g, *factor)?);
                    }
                }
                NodeKind::CenterCrop { .. } => {
                    let x = node.inputs[0];
                    if requires[x] {
                        push(&mut grads, x, tensor::center_crop_backward(val(x)?.shape(), &g)?);
                    }
                }
                NodeKind::ConcatChannels => {
                    let shapes: Vec<&[usize]> =
                        node.inputs.iter().map(|&i| val(i).map(|t| t.shape())).collect::<Result<_>>()?;
                    let parts = tensor::concat_channels_backward(&shapes, &g)?;
                    for (&i, t) in node.inputs.iter().zip(parts) {
                        push(&mut grads, i, t);
                    }
                }
                NodeKind::MseCropped { h, w } => {
                    let (p, t) = (node.inputs[0], node.inputs[1]);
                    let (gp, gt) = tensor::mse_cropped_backward(val(p)?, val(t)?, *h, *w, g.item())?;
                    push(&mut grads, p, gp);
                    push(&mut grads, t, gt);
                }
                NodeKind::SumScalar => {
                    for &i in &node.inputs {
                        push(&mut grads, i, Tensor::scalar(g.item()));
                    }
                }
            }
        }

        let inputs = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| g.filter(|_| self.nodes[id].kind == NodeKind::Input).map(|g| (id, g)))
            .collect();
        Ok((pgrads, inputs))
    }
}

fn add_into(acc: &mut Tensor, t: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_inputs_has_zero_gradients() {
        let mut params = ParameterSet::new();
        let w = params.push("w", Tensor::full(&[1, 1, 1, 1], 0.5));
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.conv("c", x, w, 1, 1);
        let l = g.mse("l", y, y, 2, 2);
        let xt = Tensor::from_fn(&[1, 3, 3, 1], |i| i as f64);
        let acts = g.forward(&params, &[(x, &xt)]).unwrap();
        assert_eq!(acts.get(l).unwrap().item(), 0.0);
        let grads = g.backward(&params, &acts, l).unwrap();
        assert!(grads.entries[0].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_one() {
        let mut params = ParameterSet::new();
        let b = params.push("b", Tensor::full(&[1], 0.3));
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.bias("y", x, b);
        let xt = Tensor::full(&[1, 1, 1, 1], 2.0);
        let acts = g.forward(&params, &[(x, &xt)]).unwrap();
        assert!((acts.get(y).unwrap().item() - 2.3).abs() < 1e-15);
        let grads = g.backward(&params, &acts, y).unwrap();
        assert_eq!(grads.entries[0].1.data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut params = ParameterSet::new();
        let b = params.push("b", Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.bias("y", x, b);
        let xt = Tensor::zeros(&[1, 2, 2, 2]);
        let acts = g.forward(&params, &[(x, &xt)]).unwrap();
        assert!(matches!(g.backward(&params, &acts, y), Err(Error::Graph(_))));
    }

    #[test]
    fn inference_mode_releases_intermediates() {
        let mut params = ParameterSet::new();
        let w = params.push("w", Tensor::full(&[1, 1, 1, 1], 2.0));
        let mut g = Graph::new();
        let x = g.input("x");
        let c = g.conv("c", x, w, 1, 1);
        let r = g.relu("r", c);
        let xt = Tensor::full(&[1, 2, 2, 1], -1.0);
        let acts = g.forward_inference(&params, &[(x, &xt)], &[r]).unwrap();
        assert!(acts.get(c).is_none());
        assert_eq!(acts.get(r).unwrap(), &Tensor::zeros(&[1, 2, 2, 1]));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut params = ParameterSet::new();
        let w = params.push("w", Tensor::zeros(&[3, 3, 1, 1]));
        let mut g = Graph::new();
        let x = g.input("x");
        g.conv("enc_conv", x, w, 3, 1);
        let feeds = HashMap::from([(x, vec![1, 2, 2, 1])]);
        match g.infer_shapes(&params, &feeds) {
            Err(Error::NegativeExtent { layer, .. }) => assert_eq!(layer, "enc_conv"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
