//! Scalar-loop transcription of the contrast embedding, written independently
//! of the tape kernels: explicit index arithmetic for shifts, convolutions
//! and norm.

use smokedet::ccpe::{Ccpe, ContrastConfig};
use smokedet::{ParamStore64, Rng, Tensor64};

pub struct Map {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub v: Vec<f64>, // [b][y][x][c]
    pub b: usize,
}

impl Map {
    pub fn at(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        self.v[((b * self.h + y) * self.w + x) * self.c + c]
    }
}

fn param<'a>(store: &'a ParamStore64, name: &str) -> &'a [f64] {
    store
        .iter()
        .find(|p| p.name == name)
        .unwrap_or_else(|| panic!("{name}"))
        .value
        .data()
}

fn conv(x: &Map, w: &[f64], bias: &[f64], k: usize, stride: usize, pad: usize, wrap: bool) -> Map {
    let cout = bias.len();
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut v = vec![0.0; x.b * oh * ow * cout];
    for b in 0..x.b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut s = bias[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut iy = (oy * stride + ky) as isize - pad as isize;
                            let mut ix = (ox * stride + kx) as isize - pad as isize;
                            if wrap {
                                iy = (iy + x.h as isize) % x.h as isize;
                                ix = (ix + x.w as isize) % x.w as isize;
                            }
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            for ci in 0..x.c {
                                s += x.at(b, iy as usize, ix as usize, ci) * w[((ky * k + kx) * x.c + ci) * cout + co];
                            }
                        }
                    }
                    v[((b * oh + oy) * ow + ox) * cout + co] = s;
                }
            }
        }
    }
    Map {
        h: oh,
        w: ow,
        c: cout,
        v,
        b: x.b,
    }
}

/// `F − F_s` with `F_s[j] = F[(j + s) mod L]` along columns (horizontal)
/// or rows (vertical).
fn contrast_input(f: &Map, s: usize, horizontal: bool) -> Map {
    let mut v = vec![0.0; f.v.len()];
    for b in 0..f.b {
        for y in 0..f.h {
            for x in 0..f.w {
                for c in 0..f.c {
                    let shifted = if horizontal {
                        f.at(b, y, (x + s) % f.w, c)
                    } else {
                        f.at(b, (y + s) % f.h, x, c)
                    };
                    v[((b * f.h + y) * f.w + x) * f.c + c] = f.at(b, y, x, c) - shifted;
                }
            }
        }
    }
    Map { v, ..*f }
}

fn concat(parts: &[&Map]) -> Map {
    let c: usize = parts.iter().map(|p| p.c).sum();
    let (b, h, w) = (parts[0].b, parts[0].h, parts[0].w);
    let mut v = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for p in parts {
                    for ci in 0..p.c {
                        v.push(p.at(bi, y, x, ci));
                    }
                }
            }
        }
    }
    Map { h, w, c, v, b }
}

pub fn branch(store: &ParamStore64, prefix: &str, f: &Map, strides: &[usize], horizontal: bool) -> (Map, Vec<Map>) {
    let masks: Vec<Map> = strides
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let d = contrast_input(f, s, horizontal);
            conv(
                &d,
                param(store, &format!("{prefix}.mask{i}.w")),
                param(store, &format!("{prefix}.mask{i}.b")),
                3,
                1,
                1,
                true,
            )
        })
        .collect();
    let mut parts = vec![f];
    parts.extend(masks.iter());
    let cat = concat(&parts);
    let fused = conv(
        &cat,
        param(store, &format!("{prefix}.fuse.w")),
        param(store, &format!("{prefix}.fuse.b")),
        3,
        1,
        1,
        true,
    );
    (fused, masks)
}

pub fn embed(store: &ParamStore64, cfg: &ContrastConfig, img: &Tensor64) -> Vec<f64> {
    let (b, h, w, c) = img.nhwc().unwrap();
    let x = Map {
        h,
        w,
        c,
        v: img.data().to_vec(),
        b,
    };
    let f = conv(&x, param(store, "ccpe.patch.w"), param(store, "ccpe.patch.b"), 4, 4, 0, false);
    let (fh, _) = branch(store, "ccpe.h", &f, &cfg.strides_h, true);
    let (fv, _) = branch(store, "ccpe.v", &fh, &cfg.strides_v, false);
    let cat = concat(&[&f, &fv]);
    if !cfg.use_norm {
        return cat.v;
    }
    let gamma = param(store, "ccpe.norm.gamma");
    let beta = param(store, "ccpe.norm.beta");
    let n = cat.c;
    let mut out = cat.v.clone();
    for row in out.chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rs * gamma[i] + beta[i];
        }
    }
    out
}

pub fn build(cfg: ContrastConfig, size: usize, seed: u64) -> (ParamStore64, Ccpe) {
    let mut store = ParamStore64::new();
    let m = Ccpe::new(&mut store, cfg, (size, size), &mut Rng::new(seed, 1)).unwrap();
    // non-zero biases and norm affine so the oracle exercises every term
    let mut rng = Rng::new(seed, 2);
    for p in store.iter_mut() {
        if p.name.ends_with(".b") || p.name.ends_with(".beta") || p.name.ends_with(".gamma") {
            p.value = Tensor64::uniform(p.value.shape(), -0.5, 0.5, &mut rng).map(|v| if p.name.ends_with("gamma") { 1.0 + v } else { v });
        }
    }
    (store, m)
}

pub fn small_cfg(strides: &[usize], cin: usize) -> ContrastConfig {
    ContrastConfig {
        strides_h: strides.to_vec(),
        strides_v: strides.to_vec(),
        in_channels: cin,
        ..Default::default()
    }
}
