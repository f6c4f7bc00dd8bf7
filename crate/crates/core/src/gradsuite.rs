//! The gradient-check suite: kernel ops, the contrast embedding, an
//! attention block, the detection head and the full training loss, each
//! checked against central differences in f64.

use std::cell::RefCell;

use crate::assign::{assign_positives, CellLayout, GtBox};
use crate::autodiff::{Axis, Fault, Graph, IouTarget, Padding, Var};
use crate::ccpe::{Ccpe, ContrastConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::loss::{compute_losses, flatten_conf, DEFAULT_BOX_WEIGHT};
use crate::model::{Detector, FeatureMaps, Head, ModelConfig, WindowAttentionBlock};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::sampling::{build_masks, SamplingConfig};
use crate::tensor::Tensor;

type T64 = Tensor<f64>;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub target: &'static str,
    pub report: GradCheckReport,
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub tolerance: f64,
    pub fault: Fault,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            tolerance: 1e-4,
            fault: Fault::None,
        }
    }
}

/// Random projection to a scalar so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = T64::randn(g.shape(y), &mut Rng::new(seed, 0x5072));
    g.dot_const(y, w)
}

fn with_params(store: &ParamStore<f64>, first: Vec<T64>) -> Vec<T64> {
    let mut v = first;
    v.extend(store.iter().map(|p| p.value.clone()));
    v
}

struct Suite {
    opts: GradCheckOptions,
    rng: RefCell<Rng>,
    out: RefCell<Vec<SuiteResult>>,
}

impl Suite {
    fn run<F>(&self, target: &'static str, inputs: Vec<T64>, max_coords: usize, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let opts = GradCheckOptions {
            max_coords,
            ..self.opts.clone()
        };
        let report = grad_check(f, &inputs, &opts)?;
        self.out.borrow_mut().push(SuiteResult { target, report });
        Ok(())
    }

    fn randn(&self, shape: &[usize]) -> T64 {
        T64::randn(shape, &mut self.rng.borrow_mut())
    }

    fn uniform(&self, shape: &[usize], lo: f64, hi: f64) -> T64 {
        T64::uniform(shape, lo, hi, &mut self.rng.borrow_mut())
    }

    fn kernel_ops(&self) -> Result<()> {
        let (x, w, b) = (self.randn(&[2, 5, 5, 3]), self.randn(&[3, 3, 3, 4]), self.randn(&[4]));
        self.run("conv2d", vec![x.clone(), w.clone(), b.clone()], 32, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            project(g, y, 1)
        })?;
        self.run("conv2d_stride2", vec![x.clone(), w.clone(), b.clone()], 32, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            project(g, y, 2)
        })?;
        self.run("conv2d_circular", vec![x.clone(), w, b], 32, |g, v| {
            let y = g.conv2d_padded(v[0], v[1], v[2], 1, 1, Padding::Circular)?;
            project(g, y, 3)
        })?;
        self.run("circular_shift", vec![self.randn(&[1, 4, 6, 2])], 32, |g, v| {
            let a = g.circular_shift(v[0], Axis::Width, 4)?;
            let b = g.circular_shift(v[0], Axis::Height, 3)?;
            let y = g.mul(a, b)?;
            project(g, y, 4)
        })?;
        self.run("matmul", vec![self.randn(&[3, 4]), self.randn(&[4, 5])], 32, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 5)
        })?;
        self.run(
            "linear",
            vec![self.randn(&[2, 3, 4]), self.randn(&[4, 3]), self.randn(&[3])],
            32,
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y, 6)
            },
        )?;
        self.run("softmax", vec![self.randn(&[3, 6])], 32, |g, v| {
            let y = g.softmax_lastdim(v[0])?;
            project(g, y, 7)
        })?;
        self.run(
            "layer_norm",
            vec![self.randn(&[2, 3, 5]), self.randn(&[5]), self.randn(&[5])],
            32,
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, 8)
            },
        )?;
        self.run("elementwise", vec![self.randn(&[2, 3, 4]), self.randn(&[2, 3, 4])], 32, |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let y = g.scale(m, 0.7)?;
            project(g, y, 9)
        })?;
        let x = self.randn(&[2, 3, 4]);
        for (name, f) in [
            ("sigmoid", Graph::<f64>::sigmoid as fn(&mut Graph<f64>, Var) -> Result<Var>),
            ("silu", Graph::<f64>::silu),
            ("gelu", Graph::<f64>::gelu),
            ("exp", Graph::<f64>::exp),
        ] {
            self.run(name, vec![x.clone()], 24, |g, v| {
                let y = f(g, v[0])?;
                project(g, y, 10)
            })?;
        }
        self.run(
            "concat_slice",
            vec![self.randn(&[1, 2, 3, 2]), self.randn(&[1, 2, 3, 3])],
            32,
            |g, v| {
                let y = g.concat(&[v[0], v[1]])?;
                let y = g.slice_lastdim(y, 1, 3)?;
                project(g, y, 11)
            },
        )?;
        self.run("upsample_nearest2x", vec![self.randn(&[1, 3, 2, 2])], 12, |g, v| {
            let y = g.upsample_nearest2x(v[0])?;
            project(g, y, 12)
        })?;
        self.run("resize_canvas", vec![self.randn(&[1, 3, 5, 2])], 30, |g, v| {
            let y = g.resize_canvas(v[0], 4, 4)?;
            project(g, y, 13)
        })?;
        self.run("window_partition_merge", vec![self.randn(&[2, 4, 4, 2])], 32, |g, v| {
            let p = g.window_partition(v[0], 2)?;
            let q = g.mul(p, p)?;
            let y = g.window_merge(q, 2, 2, 4, 4)?;
            project(g, y, 14)
        })?;
        self.run("permute_reshape", vec![self.randn(&[2, 3, 4])], 24, |g, v| {
            let y = g.permute(v[0], &[0, 2, 1])?;
            let y = g.reshape(y, &[24])?;
            let y = g.mul(y, y)?;
            project(g, y, 15)
        })?;
        let target = self.uniform(&[2, 3, 3, 1], 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let weight = self.uniform(&[2, 3, 3, 1], 0.0, 2.0);
        self.run("bce_with_logits", vec![self.randn(&[2, 3, 3, 1])], 18, |g, v| {
            g.bce_with_logits(v[0], target.clone(), weight.clone())
        })?;
        let cells = vec![
            IouTarget {
                batch: 0,
                row: 1,
                col: 1,
                target: [10.0, 12.0, 30.0, 26.0],
            },
            IouTarget {
                batch: 1,
                row: 2,
                col: 0,
                target: [2.0, 14.0, 14.0, 30.0],
            },
            IouTarget {
                batch: 0,
                row: 0,
                col: 2,
                target: [18.0, 1.0, 30.0, 11.0],
            },
        ];
        let raw = self.uniform(&[2, 3, 3, 4], -0.3, 0.3);
        self.run("iou_loss", vec![raw], 72, |g, v| g.iou_loss(v[0], 8.0, cells.clone()))
    }

    fn ccpe(&self) -> Result<()> {
        let mut store = ParamStore::new();
        let cfg = ContrastConfig {
            strides_h: vec![1, 2, 3],
            strides_v: vec![1, 2],
            base_channels: 6,
            ..ContrastConfig::default()
        };
        let m = Ccpe::new(&mut store, cfg, (16, 16), &mut self.rng.borrow_mut())?;
        let img = self.uniform(&[1, 16, 16, 3], 0.0, 1.0);
        self.run("ccpe", with_params(&store, vec![img]), 12, |g, v| {
            g.bind_vars(&v[1..]);
            let y = m.forward(g, v[0])?;
            project(g, y, 20)
        })
    }

    fn attention(&self) -> Result<()> {
        let mut store = ParamStore::new();
        let block = WindowAttentionBlock::new(&mut store, "attn", 8, 2, 2, 2, &mut self.rng.borrow_mut())?;
        let x = self.randn(&[1, 3, 4, 8]);
        self.run("attention_block", with_params(&store, vec![x]), 12, |g, v| {
            g.bind_vars(&v[1..]);
            let y = block.forward(g, v[0])?;
            project(g, y, 21)
        })
    }

    fn head(&self) -> Result<()> {
        let cfg = ModelConfig {
            base_channels: 4,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let head = Head::new(&mut store, &cfg, &mut self.rng.borrow_mut())?;
        let [c2, c3, c4] = cfg.stage_channels();
        let maps = vec![self.randn(&[1, 4, 4, c2]), self.randn(&[1, 2, 2, c3]), self.randn(&[1, 1, 1, c4])];
        self.run("head", with_params(&store, maps), 10, |g, v| {
            g.bind_vars(&v[3..]);
            let out = head.forward(
                g,
                &FeatureMaps {
                    p2: v[0],
                    p3: v[1],
                    p4: v[2],
                },
            )?;
            let mut terms = Vec::new();
            for (i, o) in out.iter().enumerate() {
                for (j, t) in [o.conf, o.cls, o.box_raw].into_iter().enumerate() {
                    terms.push(project(g, t, 30 + (3 * i + j) as u64)?);
                }
            }
            let mut s = terms[0];
            for &t in &terms[1..] {
                s = g.add(s, t)?;
            }
            Ok(s)
        })
    }

    fn total_loss(&self) -> Result<()> {
        let cfg = ModelConfig {
            base_channels: 8,
            heads: [1, 2, 2],
            blocks_per_stage: 1,
            mlp_ratio: 2,
            embed: ContrastConfig {
                strides_h: vec![1, 2, 4],
                strides_v: vec![1, 3],
                base_channels: 8,
                ..ContrastConfig::default()
            },
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, &cfg, 64, &mut self.rng.borrow_mut())?;
        let images = self.uniform(&[2, 64, 64, 3], 0.0, 1.0);
        let gts = vec![vec![GtBox::new([12.0, 18.0, 40.0, 44.0])], vec![]];
        let layout = CellLayout::for_input(64, 64, &cfg.strides);
        let assign = assign_positives(&gts, &layout, 64, 64)?;
        let mut g = Graph::new();
        g.bind(&store)?;
        let x = g.input(images.clone())?;
        let out = det.forward(&mut g, x)?;
        let scores = flatten_conf(&g, &out)?;
        let sampling = SamplingConfig {
            alpha1: 2.0,
            alpha2: 3.0,
            ..SamplingConfig::default()
        };
        let masks = build_masks(&assign, &[true, false], &scores, &sampling, &mut Rng::new(self.opts.seed, 9))?;
        self.run("total_loss", with_params(&store, vec![images]), 6, |g, v| {
            g.bind_vars(&v[1..]);
            let out = det.forward(g, v[0])?;
            Ok(compute_losses(g, &out, &assign, &masks, DEFAULT_BOX_WEIGHT)?.total)
        })
    }
}

/// Runs every target and returns one result per target, in a fixed order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteResult>> {
    let s = Suite {
        opts: GradCheckOptions {
            tolerance: opts.tolerance,
            seed: opts.seed,
            fault: opts.fault,
            ..GradCheckOptions::default()
        },
        rng: RefCell::new(Rng::new(opts.seed, 0x7375_6974)),
        out: RefCell::new(Vec::new()),
    };
    s.kernel_ops()?;
    s.ccpe()?;
    s.attention()?;
    s.head()?;
    s.total_loss()?;
    Ok(s.out.into_inner())
}
