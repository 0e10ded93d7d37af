//! Residual U-Net with an activation-classifier head on the bottleneck.
//!
//! Encoder block: `h = conv_a(x)`, `r = h + lrelu(bn2(conv_b(lrelu(bn1(h)))))`,
//! then a strided `(3,1)` convolution halves frequency and time. Decoder blocks
//! mirror this with a strided transposed `(3,1)` layer first, concatenate the
//! encoder skip, and run the same residual unit. The classifier averages the
//! bottleneck over frequency and restores frame resolution with transposed
//! convolutions along time.

use super::layers::{self, BnCache, ConvGeom, Tensor};
use super::{ModelConfig, ParamKind, SeparatorParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub geom: ConvGeom,
    pub weight: usize,
    pub bias: usize,
    pub transposed: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct BnLayer {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ResUnit {
    pub conv_a: ConvLayer,
    pub bn1: BnLayer,
    pub conv_b: ConvLayer,
    pub bn2: BnLayer,
}

#[derive(Debug, Clone)]
pub(crate) struct EncBlock {
    pub res: ResUnit,
    pub down: ConvLayer,
}

#[derive(Debug, Clone)]
pub(crate) struct DecBlock {
    pub up: ConvLayer,
    pub res: ResUnit,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub enc: Vec<EncBlock>,
    pub dec: Vec<DecBlock>,
    pub head: ConvLayer,
    pub cls: Vec<ConvLayer>,
    pub cls_bn: Vec<BnLayer>,
    pub slope: f64,
    /// Input height/width must be multiples of these.
    pub multiple_h: usize,
    pub multiple_w: usize,
}

/// Declared parameter tensor: name, shape, kind and fan-in for initialization.
#[derive(Debug, Clone)]
pub(crate) struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub fan_in: usize,
}

struct Builder {
    decls: Vec<ParamDecl>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, fan_in: usize) -> usize {
        self.decls.push(ParamDecl {
            name,
            shape,
            kind,
            fan_in,
        });
        self.decls.len() - 1
    }

    fn conv(&mut self, name: &str, geom: ConvGeom, transposed: bool) -> ConvLayer {
        let fan_in = geom.cin * geom.kh * geom.kw;
        let shape = if transposed {
            vec![geom.cin, geom.cout, geom.kh, geom.kw]
        } else {
            vec![geom.cout, geom.cin, geom.kh, geom.kw]
        };
        let weight = self.push(format!("{name}.weight"), shape, ParamKind::Weight, fan_in);
        let bias = self.push(format!("{name}.bias"), vec![geom.cout], ParamKind::Bias, fan_in);
        ConvLayer {
            geom,
            weight,
            bias,
            transposed,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnLayer {
        BnLayer {
            gamma: self.push(format!("{name}.gamma"), vec![c], ParamKind::BnScale, 0),
            beta: self.push(format!("{name}.beta"), vec![c], ParamKind::BnShift, 0),
            running_mean: self.push(format!("{name}.running_mean"), vec![c], ParamKind::RunningMean, 0),
            running_var: self.push(format!("{name}.running_var"), vec![c], ParamKind::RunningVar, 0),
        }
    }

    fn res_unit(&mut self, name: &str, cin: usize, c: usize, inner: (usize, usize)) -> ResUnit {
        ResUnit {
            conv_a: self.conv(&format!("{name}.conv_a"), ConvGeom::same(cin, c, inner.0, inner.1), false),
            bn1: self.bn(&format!("{name}.bn1"), c),
            conv_b: self.conv(&format!("{name}.conv_b"), ConvGeom::same(c, c, inner.0, inner.1), false),
            bn2: self.bn(&format!("{name}.bn2"), c),
        }
    }
}

fn resample_geom(cin: usize, cout: usize, kernel: (usize, usize), stride: (usize, usize)) -> ConvGeom {
    ConvGeom {
        cin,
        cout,
        kh: kernel.0,
        kw: kernel.1,
        sh: stride.0,
        sw: stride.1,
        ph: kernel.0 / 2,
        pw: kernel.1 / 2,
        oph: stride.0 - 1,
        opw: stride.1 - 1,
    }
}

/// Builds the layer graph and parameter declarations for a (validated) config.
pub(crate) fn build(cfg: &ModelConfig) -> (Layout, Vec<ParamDecl>) {
    let mut b = Builder { decls: Vec::new() };
    let widths = &cfg.channel_widths;
    let n = cfg.num_blocks;
    let mut enc = Vec::with_capacity(n);
    let mut cin = 1;
    for (i, &w) in widths.iter().enumerate() {
        let res = b.res_unit(&format!("enc{i}"), cin, w, cfg.inner_kernel);
        let down = b.conv(
            &format!("enc{i}.down"),
            resample_geom(w, w, cfg.resample_kernel, cfg.resample_stride),
            false,
        );
        enc.push(EncBlock { res, down });
        cin = w;
    }
    // decoder blocks are stored in execution order: deepest first
    let mut dec = Vec::with_capacity(n);
    let mut cin = widths[n - 1];
    for i in (0..n).rev() {
        let w = widths[i];
        let up = b.conv(
            &format!("dec{i}.up"),
            resample_geom(cin, w, cfg.resample_kernel, cfg.resample_stride),
            true,
        );
        let res = b.res_unit(&format!("dec{i}"), 2 * w, w, cfg.inner_kernel);
        dec.push(DecBlock { up, res });
        cin = w;
    }
    let head = b.conv("head", ConvGeom::same(widths[0], 1, 1, 1), false);

    let latent = widths[n - 1];
    let layers = cfg.classifier_layers;
    let mut cls = Vec::with_capacity(layers);
    let mut cls_bn = Vec::with_capacity(layers - 1);
    let st = cfg.resample_stride.1;
    for k in 0..layers {
        // the last `num_blocks` layers each undo one time-axis downsampling
        let stride = if k + n >= layers { st } else { 1 };
        let cout = if k + 1 == layers { 1 } else { latent };
        let geom = ConvGeom {
            cin: latent,
            cout,
            kh: 1,
            kw: 3,
            sh: 1,
            sw: stride,
            ph: 0,
            pw: 1,
            oph: 0,
            opw: stride - 1,
        };
        cls.push(b.conv(&format!("cls.t{k}"), geom, true));
        if k + 1 < layers {
            cls_bn.push(b.bn(&format!("cls.bn{k}"), latent));
        }
    }
    let layout = Layout {
        enc,
        dec,
        head,
        cls,
        cls_bn,
        slope: cfg.leaky_slope,
        multiple_h: cfg.resample_stride.0.pow(n as u32),
        multiple_w: cfg.resample_stride.1.pow(n as u32),
    };
    (layout, b.decls)
}

/// One batch-norm pass in training mode: the statistics feed running averages.
#[derive(Debug, Clone)]
pub(crate) struct BnStat {
    pub running_mean: usize,
    pub running_var: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) struct ResCache {
    x: Tensor,
    bn1: BnCache,
    y1: Tensor,
    a1: Tensor,
    bn2: BnCache,
    y2: Tensor,
}

struct EncCache {
    res: ResCache,
    r: Tensor,
}

struct DecCache {
    input: Tensor,
    res: ResCache,
    skip_c: usize,
}

struct ClsCache {
    inputs: Vec<Tensor>,
    bn: Vec<BnCache>,
    pre_act: Vec<Tensor>,
    latent_h: usize,
}

pub(crate) struct Trace {
    enc: Vec<EncCache>,
    dec: Vec<DecCache>,
    head_in: Tensor,
    cls: ClsCache,
}

impl Trace {
    /// Sign of every leaky-ReLU input; equal signatures mean the same linear piece.
    pub(crate) fn kink_signature(&self) -> Vec<bool> {
        let res = |c: &ResCache| {
            c.y1.data
                .iter()
                .chain(&c.y2.data)
                .map(|&v| v > 0.0)
                .collect::<Vec<_>>()
        };
        let mut sig = Vec::new();
        for e in &self.enc {
            sig.extend(res(&e.res));
        }
        for d in &self.dec {
            sig.extend(res(&d.res));
        }
        for p in &self.cls.pre_act {
            sig.extend(p.data.iter().map(|&v| v > 0.0));
        }
        sig
    }
}

/// Raw network outputs on padded input: mask logits `[n,1,H,W]` and activation
/// logits `[n,1,1,W]`.
pub(crate) struct NetOutput {
    pub mask_logits: Tensor,
    pub act_logits: Tensor,
}

/// Gradient w.r.t. every declared tensor (running statistics stay zero).
pub(crate) type Grads = Vec<Vec<f64>>;

impl Layout {
    fn conv(&self, p: &SeparatorParams, l: &ConvLayer, x: &Tensor) -> Tensor {
        let (w, b) = (p.data(l.weight), p.data(l.bias));
        if l.transposed {
            layers::conv_transpose2d_forward(x, w, b, &l.geom)
        } else {
            layers::conv2d_forward(x, w, b, &l.geom)
        }
    }

    fn conv_back(&self, p: &SeparatorParams, l: &ConvLayer, x: &Tensor, dy: &Tensor, g: &mut Grads) -> Tensor {
        let w = p.data(l.weight);
        let (dx, dw, db) = if l.transposed {
            layers::conv_transpose2d_backward(x, w, &l.geom, dy)
        } else {
            layers::conv2d_backward(x, w, &l.geom, dy)
        };
        accumulate(&mut g[l.weight], &dw);
        accumulate(&mut g[l.bias], &db);
        dx
    }

    fn bn(
        &self,
        p: &SeparatorParams,
        l: &BnLayer,
        x: &Tensor,
        mode: Mode,
        stats: &mut Vec<BnStat>,
    ) -> (Tensor, Option<BnCache>) {
        match mode {
            Mode::Train => {
                let (y, cache) = layers::batchnorm_train(x, p.data(l.gamma), p.data(l.beta));
                stats.push(BnStat {
                    running_mean: l.running_mean,
                    running_var: l.running_var,
                    mean: cache.mean.clone(),
                    var: cache.var.clone(),
                    count: cache.count,
                });
                (y, Some(cache))
            }
            Mode::Eval => (
                layers::batchnorm_eval(
                    x,
                    p.data(l.gamma),
                    p.data(l.beta),
                    p.data(l.running_mean),
                    p.data(l.running_var),
                ),
                None,
            ),
        }
    }

    fn bn_back(&self, p: &SeparatorParams, l: &BnLayer, cache: &BnCache, dy: &Tensor, g: &mut Grads) -> Tensor {
        let (dx, dgamma, dbeta) = layers::batchnorm_backward(cache, p.data(l.gamma), dy);
        accumulate(&mut g[l.gamma], &dgamma);
        accumulate(&mut g[l.beta], &dbeta);
        dx
    }

    pub(crate) fn res_forward(
        &self,
        p: &SeparatorParams,
        u: &ResUnit,
        x: &Tensor,
        mode: Mode,
        stats: &mut Vec<BnStat>,
    ) -> (Tensor, Option<ResCache>) {
        let h = self.conv(p, &u.conv_a, x);
        let (y1, bn1) = self.bn(p, &u.bn1, &h, mode, stats);
        let a1 = layers::leaky_relu(&y1, self.slope);
        let c2 = self.conv(p, &u.conv_b, &a1);
        let (y2, bn2) = self.bn(p, &u.bn2, &c2, mode, stats);
        let out = h.add(&layers::leaky_relu(&y2, self.slope));
        let cache = match (bn1, bn2) {
            (Some(bn1), Some(bn2)) => Some(ResCache {
                x: x.clone(),
                bn1,
                y1,
                a1,
                bn2,
                y2,
            }),
            _ => None,
        };
        (out, cache)
    }

    fn res_backward(&self, p: &SeparatorParams, u: &ResUnit, c: &ResCache, dout: &Tensor, g: &mut Grads) -> Tensor {
        let dy2 = layers::leaky_relu_backward(&c.y2, self.slope, dout);
        let dc2 = self.bn_back(p, &u.bn2, &c.bn2, &dy2, g);
        let da1 = self.conv_back(p, &u.conv_b, &c.a1, &dc2, g);
        let dy1 = layers::leaky_relu_backward(&c.y1, self.slope, &da1);
        let mut dh = self.bn_back(p, &u.bn1, &c.bn1, &dy1, g);
        dh.add_assign(dout);
        self.conv_back(p, &u.conv_a, &c.x, &dh, g)
    }

    pub(crate) fn forward(
        &self,
        p: &SeparatorParams,
        input: &Tensor,
        mode: Mode,
    ) -> (NetOutput, Option<Trace>, Vec<BnStat>) {
        let mut stats = Vec::new();
        let train = mode == Mode::Train;
        let mut x = input.clone();
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut enc_caches = Vec::new();
        for blk in &self.enc {
            let (r, cache) = self.res_forward(p, &blk.res, &x, mode, &mut stats);
            let down = self.conv(p, &blk.down, &r);
            if let Some(res) = cache {
                enc_caches.push(EncCache { res, r: r.clone() });
            }
            skips.push(r);
            x = down;
        }
        let latent = x;

        let mut y = latent.clone();
        let mut dec_caches = Vec::new();
        for (k, blk) in self.dec.iter().enumerate() {
            let level = self.enc.len() - 1 - k;
            let u = self.conv(p, &blk.up, &y);
            let z = layers::concat_channels(&u, &skips[level]);
            let (out, cache) = self.res_forward(p, &blk.res, &z, mode, &mut stats);
            if let Some(res) = cache {
                dec_caches.push(DecCache {
                    input: y.clone(),
                    res,
                    skip_c: skips[level].c,
                });
            }
            y = out;
        }
        let mask_logits = self.conv(p, &self.head, &y);

        let pooled = layers::mean_over_freq(&latent);
        let mut c = pooled;
        let mut cls = ClsCache {
            inputs: Vec::new(),
            bn: Vec::new(),
            pre_act: Vec::new(),
            latent_h: latent.h,
        };
        for (k, layer) in self.cls.iter().enumerate() {
            let t = self.conv(p, layer, &c);
            if train {
                cls.inputs.push(c.clone());
            }
            if k + 1 < self.cls.len() {
                let (b, cache) = self.bn(p, &self.cls_bn[k], &t, mode, &mut stats);
                c = layers::leaky_relu(&b, self.slope);
                if let Some(cache) = cache {
                    cls.bn.push(cache);
                    cls.pre_act.push(b);
                }
            } else {
                c = t;
            }
        }
        let out = NetOutput {
            mask_logits,
            act_logits: c,
        };
        let trace = train.then_some(Trace {
            enc: enc_caches,
            dec: dec_caches,
            head_in: y,
            cls,
        });
        (out, trace, stats)
    }

    /// Backpropagates output gradients through a training-mode trace.
    pub(crate) fn backward(
        &self,
        p: &SeparatorParams,
        trace: &Trace,
        d_mask_logits: &Tensor,
        d_act_logits: &Tensor,
    ) -> Grads {
        let mut g: Grads = p.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();

        // classifier
        let mut dc = d_act_logits.clone();
        for k in (0..self.cls.len()).rev() {
            if k + 1 < self.cls.len() {
                let dpre = layers::leaky_relu_backward(&trace.cls.pre_act[k], self.slope, &dc);
                dc = self.bn_back(p, &self.cls_bn[k], &trace.cls.bn[k], &dpre, &mut g);
            }
            dc = self.conv_back(p, &self.cls[k], &trace.cls.inputs[k], &dc, &mut g);
        }
        let d_latent_cls = layers::mean_over_freq_backward(&dc, trace.cls.latent_h);

        // mask head and decoder
        let mut dy = self.conv_back(p, &self.head, &trace.head_in, d_mask_logits, &mut g);
        let mut d_skips: Vec<Option<Tensor>> = vec![None; self.enc.len()];
        for (k, blk) in self.dec.iter().enumerate().rev() {
            let cache = &trace.dec[k];
            let level = self.enc.len() - 1 - k;
            let dz = self.res_backward(p, &blk.res, &cache.res, &dy, &mut g);
            let up_c = dz.c - cache.skip_c;
            let (du, dskip) = layers::split_channels(&dz, up_c);
            d_skips[level] = Some(dskip);
            dy = self.conv_back(p, &blk.up, &cache.input, &du, &mut g);
        }
        // dy now holds the decoder's gradient w.r.t. the latent
        let mut dx = dy;
        dx.add_assign(&d_latent_cls);

        for (i, blk) in self.enc.iter().enumerate().rev() {
            let cache = &trace.enc[i];
            let mut dr = self.conv_back(p, &blk.down, &cache.r, &dx, &mut g);
            if let Some(ds) = &d_skips[i] {
                dr.add_assign(ds);
            }
            dx = self.res_backward(p, &blk.res, &cache.res, &dr, &mut g);
        }
        g
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
