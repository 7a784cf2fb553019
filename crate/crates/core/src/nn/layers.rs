//! Single-sample layers over cubic feature maps with hand-written backward
//! passes. Parameters live in one flat `f64` buffer; layers hold offsets.

use matrixmultiply::dgemm;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `c` channels over a `d x d x d` grid, layout `[c][z][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Fmap {
    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            c,
            d,
            data: vec![0.0; c * d * d * d],
        }
    }

    pub fn from_vec(c: usize, d: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * d * d * d);
        Self { c, d, data }
    }

    pub fn voxels(&self) -> usize {
        self.d * self.d * self.d
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Global average pool to one value per channel.
    pub fn pooled(&self) -> Vec<f64> {
        (0..self.c)
            .map(|c| self.channel(c).iter().sum::<f64>() / self.voxels() as f64)
            .collect()
    }

    pub fn add_assign(&mut self, other: &Fmap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

/// Allocates parameter ranges and records their initial values.
#[derive(Default)]
pub struct ParamBuilder {
    pub init: Vec<f64>,
}

impl ParamBuilder {
    fn uniform(&mut self, n: usize, bound: f64, rng: &mut ChaCha8Rng) -> usize {
        let off = self.init.len();
        self.init.extend((0..n).map(|_| {
            if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            }
        }));
        off
    }

    fn constant(&mut self, n: usize, v: f64) -> usize {
        let off = self.init.len();
        self.init.resize(off + n, v);
        off
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_map(x: &Fmap) -> Fmap {
    Fmap {
        c: x.c,
        d: x.d,
        data: x.data.iter().map(|&v| silu(v)).collect(),
    }
}

/// `dy * silu'(x)`, elementwise.
pub fn silu_backward(x: &Fmap, dy: &Fmap) -> Fmap {
    Fmap {
        c: x.c,
        d: x.d,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&a, &g)| g * silu_grad(a))
            .collect(),
    }
}

/// Same-padded 3D convolution with a cubic kernel of odd side `k`.
#[derive(Clone, Copy, Debug)]
pub struct Conv3 {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    w: usize,
    b: usize,
}

/// Output z-planes per im2col chunk, keeping the column buffer modest.
fn chunk_planes(d: usize) -> usize {
    (4096 / (d * d)).clamp(1, d)
}

impl Conv3 {
    pub fn new(
        pb: &mut ParamBuilder,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = pb.uniform(cout * fan_in, bound, rng);
        let b = pb.uniform(cout, bound, rng);
        Self { cin, cout, k, w, b }
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Fills `cols` (kdim x n, row-major) for output planes `z0..z1`.
    fn im2col(&self, x: &Fmap, z0: usize, z1: usize, cols: &mut [f64]) {
        let (d, k) = (x.d as isize, self.k as isize);
        let r = k / 2;
        let n = (z1 - z0) * x.d * x.d;
        let du = x.d;
        let mut row = 0;
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut cols[row * n..(row + 1) * n];
                        let xs = (r - kx).max(0) as usize;
                        let xe = (d + r - kx).min(d) as usize;
                        for z in z0..z1 {
                            let sz = z as isize + kz - r;
                            for y in 0..du {
                                let sy = y as isize + ky - r;
                                let o = ((z - z0) * du + y) * du;
                                let line = &mut dst[o..o + du];
                                if sz < 0 || sz >= d || sy < 0 || sy >= d || xs >= xe {
                                    line.fill(0.0);
                                    continue;
                                }
                                line[..xs].fill(0.0);
                                line[xe..].fill(0.0);
                                let s = ((sz as usize * du) + sy as usize) * du;
                                let sx = (xs as isize + kx - r) as usize;
                                line[xs..xe].copy_from_slice(&src[s + sx..s + sx + (xe - xs)]);
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adds columns back onto their source voxels (adjoint of `im2col`).
    fn col2im(&self, cols: &[f64], z0: usize, z1: usize, dx: &mut Fmap) {
        let (d, k) = (dx.d as isize, self.k as isize);
        let r = k / 2;
        let du = dx.d;
        let n = (z1 - z0) * du * du;
        let nv = dx.voxels();
        let mut row = 0;
        for ci in 0..self.cin {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &cols[row * n..(row + 1) * n];
                        let xs = (r - kx).max(0) as usize;
                        let xe = (d + r - kx).min(d) as usize;
                        let dst = &mut dx.data[ci * nv..(ci + 1) * nv];
                        for z in z0..z1 {
                            let sz = z as isize + kz - r;
                            if sz < 0 || sz >= d {
                                continue;
                            }
                            for y in 0..du {
                                let sy = y as isize + ky - r;
                                if sy < 0 || sy >= d || xs >= xe {
                                    continue;
                                }
                                let o = ((z - z0) * du + y) * du;
                                let s = ((sz as usize * du) + sy as usize) * du;
                                let sx = (xs as isize + kx - r) as usize;
                                for (a, b) in dst[s + sx..s + sx + (xe - xs)]
                                    .iter_mut()
                                    .zip(&src[o + xs..o + xe])
                                {
                                    *a += b;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    pub fn forward(&self, p: &[f64], x: &Fmap) -> Fmap {
        assert_eq!(x.c, self.cin, "conv input channels");
        let d = x.d;
        let (d2, d3) = (d * d, d * d * d);
        let kdim = self.kdim();
        let w = &p[self.w..self.w + self.cout * kdim];
        let b = &p[self.b..self.b + self.cout];
        let zc = chunk_planes(d);
        let mut out = Fmap::zeros(self.cout, d);
        let mut cols = vec![0.0; kdim * zc * d2];
        for z0 in (0..d).step_by(zc) {
            let z1 = (z0 + zc).min(d);
            let n = (z1 - z0) * d2;
            self.im2col(x, z0, z1, &mut cols[..kdim * n]);
            // SAFETY: all pointers address live buffers of the sizes implied by
            // (m, k, n) and the given strides.
            unsafe {
                dgemm(
                    self.cout,
                    kdim,
                    n,
                    1.0,
                    w.as_ptr(),
                    kdim as isize,
                    1,
                    cols.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.data.as_mut_ptr().add(z0 * d2),
                    d3 as isize,
                    1,
                );
            }
        }
        for (co, &bias) in b.iter().enumerate() {
            out.data[co * d3..(co + 1) * d3]
                .iter_mut()
                .for_each(|v| *v += bias);
        }
        out
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient
    /// when `need_dx`.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &Fmap,
        dy: &Fmap,
        need_dx: bool,
    ) -> Option<Fmap> {
        let d = x.d;
        let (d2, d3) = (d * d, d * d * d);
        let kdim = self.kdim();
        for co in 0..self.cout {
            g[self.b + co] += dy.channel(co).iter().sum::<f64>();
        }
        let zc = chunk_planes(d);
        let mut cols = vec![0.0; kdim * zc * d2];
        let mut dcols = if need_dx {
            vec![0.0; kdim * zc * d2]
        } else {
            Vec::new()
        };
        let mut dx = need_dx.then(|| Fmap::zeros(self.cin, d));
        let w = &p[self.w..self.w + self.cout * kdim];
        for z0 in (0..d).step_by(zc) {
            let z1 = (z0 + zc).min(d);
            let n = (z1 - z0) * d2;
            self.im2col(x, z0, z1, &mut cols[..kdim * n]);
            let gw = &mut g[self.w..self.w + self.cout * kdim];
            // SAFETY: as in `forward`; `cols` is read transposed via strides.
            unsafe {
                dgemm(
                    self.cout,
                    n,
                    kdim,
                    1.0,
                    dy.data.as_ptr().add(z0 * d2),
                    d3 as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    n as isize,
                    1.0,
                    gw.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // SAFETY: `w` is read transposed via strides.
                unsafe {
                    dgemm(
                        kdim,
                        self.cout,
                        n,
                        1.0,
                        w.as_ptr(),
                        1,
                        kdim as isize,
                        dy.data.as_ptr().add(z0 * d2),
                        d3 as isize,
                        1,
                        0.0,
                        dcols.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                self.col2im(&dcols[..kdim * n], z0, z1, dx);
            }
        }
        dx
    }
}

/// Group normalization with per-sample statistics.
#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    gamma: usize,
    beta: usize,
}

pub struct GnTape {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

const GN_EPS: f64 = 1e-5;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl GroupNorm {
    /// Uses the largest group count <= `groups` that divides `c`.
    pub fn new(pb: &mut ParamBuilder, c: usize, groups: usize) -> Self {
        let groups = gcd(c, groups.max(1));
        let gamma = pb.constant(c, 1.0);
        let beta = pb.constant(c, 0.0);
        Self {
            c,
            groups,
            gamma,
            beta,
        }
    }

    pub fn forward(&self, p: &[f64], x: &Fmap) -> (Fmap, GnTape) {
        let nv = x.voxels();
        let cg = self.c / self.groups;
        let n = (cg * nv) as f64;
        let mut xhat = vec![0.0; x.data.len()];
        let mut rstd = vec![0.0; self.groups];
        let mut y = Fmap::zeros(x.c, x.d);
        for gi in 0..self.groups {
            let r = gi * cg * nv..(gi + 1) * cg * nv;
            let xs = &x.data[r.clone()];
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let rs = 1.0 / (var + GN_EPS).sqrt();
            rstd[gi] = rs;
            for (h, v) in xhat[r].iter_mut().zip(xs) {
                *h = (v - mean) * rs;
            }
        }
        for c in 0..self.c {
            let (gm, bt) = (p[self.gamma + c], p[self.beta + c]);
            for i in c * nv..(c + 1) * nv {
                y.data[i] = gm * xhat[i] + bt;
            }
        }
        (y, GnTape { xhat, rstd })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], tape: &GnTape, dy: &Fmap) -> Fmap {
        let nv = dy.voxels();
        let cg = self.c / self.groups;
        let n = (cg * nv) as f64;
        let mut dxhat = vec![0.0; dy.data.len()];
        for c in 0..self.c {
            let gm = p[self.gamma + c];
            let (mut dg, mut db) = (0.0, 0.0);
            for i in c * nv..(c + 1) * nv {
                dg += dy.data[i] * tape.xhat[i];
                db += dy.data[i];
                dxhat[i] = dy.data[i] * gm;
            }
            g[self.gamma + c] += dg;
            g[self.beta + c] += db;
        }
        let mut dx = Fmap::zeros(dy.c, dy.d);
        for gi in 0..self.groups {
            let r = gi * cg * nv..(gi + 1) * cg * nv;
            let m1 = dxhat[r.clone()].iter().sum::<f64>() / n;
            let m2 = dxhat[r.clone()]
                .iter()
                .zip(&tape.xhat[r.clone()])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n;
            let rs = tape.rstd[gi];
            for i in r {
                dx.data[i] = rs * (dxhat[i] - m1 - tape.xhat[i] * m2);
            }
        }
        dx
    }
}

/// Dense layer `y = W x + b`, `W` row-major `out x in`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = pb.uniform(inp * out, bound, rng);
        let b = pb.uniform(out, bound, rng);
        Self { inp, out, w, b }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|o| {
                let row = &p[self.w + o * self.inp..self.w + (o + 1) * self.inp];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[self.b + o]
            })
            .collect()
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inp];
        for o in 0..self.out {
            let gy = dy[o];
            g[self.b + o] += gy;
            if gy == 0.0 {
                continue;
            }
            let base = self.w + o * self.inp;
            for i in 0..self.inp {
                g[base + i] += gy * x[i];
                dx[i] += gy * p[base + i];
            }
        }
        dx
    }
}

pub fn avg_pool2(x: &Fmap) -> Fmap {
    let h = x.d / 2;
    let mut y = Fmap::zeros(x.c, h);
    let d = x.d;
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut y.data[c * h * h * h..(c + 1) * h * h * h];
        for z in 0..d {
            for yy in 0..d {
                for xx in 0..d {
                    dst[((z / 2) * h + yy / 2) * h + xx / 2] += 0.125 * src[(z * d + yy) * d + xx];
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &Fmap) -> Fmap {
    let mut dx = up2(dy);
    dx.data.iter_mut().for_each(|v| *v *= 0.125);
    dx
}

/// Nearest-neighbour upsampling by 2.
pub fn up2(x: &Fmap) -> Fmap {
    let d = x.d * 2;
    let h = x.d;
    let mut y = Fmap::zeros(x.c, d);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut y.data[c * d * d * d..(c + 1) * d * d * d];
        for z in 0..d {
            for yy in 0..d {
                for xx in 0..d {
                    dst[(z * d + yy) * d + xx] = src[((z / 2) * h + yy / 2) * h + xx / 2];
                }
            }
        }
    }
    y
}

pub fn up2_backward(dy: &Fmap) -> Fmap {
    let mut dx = avg_pool2(dy);
    dx.data.iter_mut().for_each(|v| *v *= 8.0);
    dx
}

pub fn concat(a: &Fmap, b: &Fmap) -> Fmap {
    assert_eq!(a.d, b.d);
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Fmap {
        c: a.c + b.c,
        d: a.d,
        data,
    }
}

pub fn split(x: &Fmap, ca: usize) -> (Fmap, Fmap) {
    let n = ca * x.voxels();
    (
        Fmap {
            c: ca,
            d: x.d,
            data: x.data[..n].to_vec(),
        },
        Fmap {
            c: x.c - ca,
            d: x.d,
            data: x.data[n..].to_vec(),
        },
    )
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        e[i] = (t * freq).sin();
        e[half + i] = (t * freq).cos();
    }
    e
}
