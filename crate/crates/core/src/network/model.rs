//! The assembled detector: backbone per the spec, PAN neck with EMA, decoupled head.

use super::spec::{LayerKind, NetworkSpec};
use crate::error::{config_err, dim_err};
use crate::nn::{join, Params, C2f, Conv2d, ConvModule, DeformAttn, Ema, Init, Sppf, StarBlock};
use crate::{Graph, Result, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub enum Layer<T: Scalar> {
    Conv(ConvModule<T>),
    Star(StarBlock<T>),
    C2f(C2f<T>),
    Sppf(Sppf<T>),
    Deform(DeformAttn<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Layer::Conv(l) => l.forward(g, x),
            Layer::Star(l) => l.forward(g, x),
            Layer::C2f(l) => l.forward(g, x),
            Layer::Sppf(l) => l.forward(g, x),
            Layer::Deform(l) => l.forward(g, x),
        }
    }

    fn params(&self) -> &dyn Params<T> {
        match self {
            Layer::Conv(l) => l,
            Layer::Star(l) => l,
            Layer::C2f(l) => l,
            Layer::Sppf(l) => l,
            Layer::Deform(l) => l,
        }
    }

    fn params_mut(&mut self) -> &mut dyn Params<T> {
        match self {
            Layer::Conv(l) => l,
            Layer::Star(l) => l,
            Layer::C2f(l) => l,
            Layer::Sppf(l) => l,
            Layer::Deform(l) => l,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedLayer<T: Scalar> {
    pub name: String,
    pub layer: Layer<T>,
}

/// YOLOv8 PAN: top-down to the 80×80 level, then bottom-up, one EMA per output.
#[derive(Clone, Debug)]
pub struct Neck<T: Scalar> {
    pub td4: C2f<T>,
    pub td3: C2f<T>,
    pub down3: ConvModule<T>,
    pub bu4: C2f<T>,
    pub down4: ConvModule<T>,
    pub bu5: C2f<T>,
    pub ema3: Ema<T>,
    pub ema4: Ema<T>,
    pub ema5: Ema<T>,
}
crate::nn::impl_params!(Neck { td4, td3, down3, bu4, down4, bu5, ema3, ema4, ema5 });

/// Box and class branches for one pyramid level.
#[derive(Clone, Debug)]
pub struct HeadLevel<T: Scalar> {
    pub box1: ConvModule<T>,
    pub box2: ConvModule<T>,
    pub box_out: Conv2d<T>,
    pub cls1: ConvModule<T>,
    pub cls2: ConvModule<T>,
    pub cls_out: Conv2d<T>,
}
crate::nn::impl_params!(HeadLevel { box1, box2, box_out, cls1, cls2, cls_out });

/// Raw logits of one level: `box` is `[4,H,W]` (left, top, right, bottom), `cls` is `[nc,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub stride: usize,
    pub boxes: Var,
    pub cls: Var,
}

/// Called after each named stage with its output; may return a replacement.
pub type Hook<'a, T> = dyn FnMut(&str, &mut Graph<T>, Var) -> Result<Var> + 'a;

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    spec: NetworkSpec,
    pub backbone: Vec<NamedLayer<T>>,
    pub neck: Neck<T>,
    pub head: Vec<HeadLevel<T>>,
    /// When false the neck skips its three EMA blocks.
    pub ema_enabled: bool,
}

pub const NECK_OUTPUTS: [&str; 3] = ["neck.p3", "neck.p4", "neck.p5"];

impl<T: Scalar> Model<T> {
    /// Random weights from `seed`: fan-in uniform convolutions, identity BN,
    /// zero biases except the class prior.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init::new(seed);
        let mut backbone = Vec::new();
        let mut c = spec.input.channels();
        for l in &spec.backbone {
            let out = l.output.channels();
            let layer = match l.kind {
                LayerKind::Feat { .. } => continue,
                LayerKind::ConvModule { stride, kernel } => Layer::Conv(ConvModule::new(&mut init, c, out, kernel, stride)),
                LayerKind::StarBlock => Layer::Star(StarBlock::new(&mut init, c)),
                LayerKind::C2f { depth, shortcut } => Layer::C2f(C2f::new(&mut init, c, out, depth, shortcut)),
                LayerKind::Sppf => Layer::Sppf(Sppf::new(&mut init, c, out)),
                LayerKind::DeformableAttention { heads } => Layer::Deform(DeformAttn::new(&mut init, c, heads)?),
            };
            backbone.push(NamedLayer { name: l.name.clone(), layer });
            c = out;
        }

        let [c3, c4, c5] = spec.feat_channels()?;
        let (n, groups) = (spec.neck.c2f_depth, spec.neck.ema_groups);
        let neck = Neck {
            td4: C2f::new(&mut init, c5 + c4, c4, n, false),
            td3: C2f::new(&mut init, c4 + c3, c3, n, false),
            down3: ConvModule::new(&mut init, c3, c3, 3, 2),
            bu4: C2f::new(&mut init, c3 + c4, c4, n, false),
            down4: ConvModule::new(&mut init, c4, c4, 3, 2),
            bu5: C2f::new(&mut init, c4 + c5, c5, n, false),
            ema3: Ema::new(&mut init, c3, groups)?,
            ema4: Ema::new(&mut init, c4, groups)?,
            ema5: Ema::new(&mut init, c5, groups)?,
        };

        let nc = spec.num_classes();
        let hid = spec.head.hidden;
        let side = spec.input.0 as f64;
        let head = [c3, c4, c5]
            .iter()
            .zip(&spec.head.strides)
            .map(|(&ch, &stride)| {
                let mut cls_out = Conv2d::new(&mut init, hid, nc, 1, 1, true);
                // prior of roughly five objects per image spread over the level's cells
                let cells = (side / stride as f64).powi(2);
                let prior = (5.0 / nc as f64 / cells).ln();
                cls_out.bias = Some(Tensor::full(&[nc], T::lit(prior)));
                HeadLevel {
                    box1: ConvModule::new(&mut init, ch, hid, 3, 1),
                    box2: ConvModule::new(&mut init, hid, hid, 3, 1),
                    box_out: Conv2d::new(&mut init, hid, 4, 1, 1, true),
                    cls1: ConvModule::new(&mut init, ch, hid, 3, 1),
                    cls2: ConvModule::new(&mut init, hid, hid, 3, 1),
                    cls_out,
                }
            })
            .collect();

        Ok(Self { spec, backbone, neck, head, ema_enabled: true })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec.hash()
    }

    /// Names accepted by [`Model::forward_hooked`] hooks and Grad-CAM.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.backbone.iter().map(|l| l.name.clone()).collect();
        names.extend(NECK_OUTPUTS.iter().map(|s| s.to_string()));
        names
    }

    /// Every weight cast to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::new(self.spec.clone(), 0)?;
        let mut src = Vec::new();
        self.visit("", &mut |_, t| src.push(t.cast::<U>()));
        let mut it = src.into_iter();
        out.visit_mut("", &mut |_, t| *t = it.next().expect("same structure"));
        out.ema_enabled = self.ema_enabled;
        Ok(out)
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = self.spec.input;
        let want = [s.2, s.0, s.1];
        if g.shape(x) != want {
            return Err(dim_err!("network input must be {:?} ([C,H,W]), got {:?}", want, g.shape(x)));
        }
        Ok(())
    }

    /// Backbone through the hook; returns Feat1..Feat3.
    pub fn backbone_hooked(&self, g: &mut Graph<T>, x: Var, hook: &mut Hook<'_, T>) -> Result<[Var; 3]> {
        self.check_input(g, x)?;
        let mut feats = [None; 3];
        let mut cur = x;
        let mut it = self.backbone.iter();
        for l in &self.spec.backbone {
            match l.kind {
                LayerKind::Feat { level } => feats[level - 1] = Some(cur),
                _ => {
                    let nl = it.next().ok_or_else(|| config_err!("model has fewer layers than its spec"))?;
                    let y = nl.layer.forward(g, cur)?;
                    cur = hook(&nl.name, g, y)?;
                }
            }
        }
        let get = |i: usize| feats[i].ok_or_else(|| config_err!("Feat{} never produced", i + 1));
        Ok([get(0)?, get(1)?, get(2)?])
    }

    pub fn neck_hooked(&self, g: &mut Graph<T>, feats: [Var; 3], hook: &mut Hook<'_, T>) -> Result<[Var; 3]> {
        let [f1, f2, f3] = feats;
        let n = &self.neck;
        let ema = |g: &mut Graph<T>, e: &Ema<T>, x: Var| if self.ema_enabled { e.forward(g, x) } else { Ok(x) };

        let up = g.upsample_nearest(f3, 2)?;
        let cat = g.concat(&[up, f2], 0)?;
        let t4 = n.td4.forward(g, cat)?;
        let up = g.upsample_nearest(t4, 2)?;
        let cat = g.concat(&[up, f1], 0)?;
        let t3 = n.td3.forward(g, cat)?;
        let p3 = ema(g, &n.ema3, t3)?;
        let p3 = hook(NECK_OUTPUTS[0], g, p3)?;

        let d = n.down3.forward(g, p3)?;
        let cat = g.concat(&[d, t4], 0)?;
        let b4 = n.bu4.forward(g, cat)?;
        let p4 = ema(g, &n.ema4, b4)?;
        let p4 = hook(NECK_OUTPUTS[1], g, p4)?;

        let d = n.down4.forward(g, p4)?;
        let cat = g.concat(&[d, f3], 0)?;
        let b5 = n.bu5.forward(g, cat)?;
        let p5 = ema(g, &n.ema5, b5)?;
        let p5 = hook(NECK_OUTPUTS[2], g, p5)?;
        Ok([p3, p4, p5])
    }

    pub fn head_forward(&self, g: &mut Graph<T>, pyramid: [Var; 3]) -> Result<Vec<LevelVars>> {
        let mut out = Vec::with_capacity(3);
        for ((h, &p), &stride) in self.head.iter().zip(&pyramid).zip(&self.spec.head.strides) {
            let b = h.box1.forward(g, p)?;
            let b = h.box2.forward(g, b)?;
            let boxes = h.box_out.forward(g, b)?;
            let c = h.cls1.forward(g, p)?;
            let c = h.cls2.forward(g, c)?;
            let cls = h.cls_out.forward(g, c)?;
            out.push(LevelVars { stride, boxes, cls });
        }
        Ok(out)
    }

    /// Full forward to head logits, calling `hook` after every named stage.
    pub fn forward_hooked(&self, g: &mut Graph<T>, x: Var, hook: &mut Hook<'_, T>) -> Result<Vec<LevelVars>> {
        let feats = self.backbone_hooked(g, x, hook)?;
        let pyramid = self.neck_hooked(g, feats, hook)?;
        self.head_forward(g, pyramid)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<LevelVars>> {
        self.forward_hooked(g, x, &mut |_, _, v| Ok(v))
    }
}

impl<T: Scalar> Params<T> for Model<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for l in &self.backbone {
            l.layer.params().visit(&join(&join(prefix, "backbone"), &l.name), f);
        }
        self.neck.visit(&join(prefix, "neck"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for l in &mut self.backbone {
            let p = join(&join(prefix, "backbone"), &l.name);
            l.layer.params_mut().visit_mut(&p, f);
        }
        self.neck.visit_mut(&join(prefix, "neck"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Sum of all weight element counts, BN running statistics included.
pub fn param_count<T: Scalar>(model: &Model<T>) -> usize {
    model.param_count()
}

fn run<T: Scalar, R>(x: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var) -> Result<R>) -> Result<(Graph<T>, R)> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let r = f(&mut g, xv)?;
    Ok((g, r))
}

pub fn backbone_forward<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (g, [a, b, c]) = run(image, |g, x| model.backbone_hooked(g, x, &mut |_, _, v| Ok(v)))?;
    Ok((g.value(a).clone(), g.value(b).clone(), g.value(c).clone()))
}

pub fn neck_forward<T: Scalar>(model: &Model<T>, feats: (&Tensor<T>, &Tensor<T>, &Tensor<T>)) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut g = Graph::inference();
    let f = [g.constant(feats.0.clone()), g.constant(feats.1.clone()), g.constant(feats.2.clone())];
    let [a, b, c] = model.neck_hooked(&mut g, f, &mut |_, _, v| Ok(v))?;
    Ok((g.value(a).clone(), g.value(b).clone(), g.value(c).clone()))
}

/// Per-stage output shapes (`[C,H,W]`) of one forward, in execution order,
/// plus the flop count of the whole pass.
pub fn trace_shapes<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<(Vec<(String, Vec<usize>)>, u64)> {
    let mut trace = Vec::new();
    let (g, _) = run(image, |g, x| {
        model.forward_hooked(g, x, &mut |name, g, v| {
            trace.push((name.to_string(), g.shape(v).to_vec()));
            Ok(v)
        })
    })?;
    Ok((trace, g.flops()))
}
