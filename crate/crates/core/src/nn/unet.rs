//! Time-conditioned 3D U-Net noise predictor with a 256-channel bottleneck.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use crate::error::{Error, Result};

pub const BOTTLENECK_CHANNELS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Patch side in voxels; must be divisible by `2^levels`.
    pub side: usize,
    /// Channel width per resolution level.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub time_embed_dim: usize,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            side: 32,
            widths: vec![32, 64, 128],
            groups: 8,
            time_embed_dim: 32,
            time_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn bottleneck_side(&self) -> usize {
        self.side >> self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid(
                "U-Net needs at least one non-zero level width",
            ));
        }
        let div = 1usize << self.levels();
        if self.side == 0 || !self.side.is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "patch side {} is not divisible by 2^{} levels",
                self.side,
                self.levels()
            )));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) || self.time_dim == 0 {
            return Err(Error::invalid(
                "time embedding dims must be positive and even",
            ));
        }
        Ok(())
    }
}

/// `out = conv(silu(gn(x))) + proj(temb) + skip(x)`.
#[derive(Clone, Debug)]
struct ResBlock {
    gn: GroupNorm,
    conv: Conv3,
    temb: Linear,
    skip: Option<Conv3>,
}

struct BlockTape {
    x: Fmap,
    gn: GnTape,
    a: Fmap,
    s: Fmap,
}

impl ResBlock {
    fn new(
        pb: &mut ParamBuilder,
        cin: usize,
        cout: usize,
        cfg: &UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            gn: GroupNorm::new(pb, cin, cfg.groups),
            conv: Conv3::new(pb, cin, cout, 3, rng),
            temb: Linear::new(pb, cfg.time_dim, cout, rng),
            skip: (cin != cout).then(|| Conv3::new(pb, cin, cout, 1, rng)),
        }
    }

    fn forward(&self, p: &[f64], x: Fmap, temb: &[f64]) -> (Fmap, BlockTape) {
        let (a, gn) = self.gn.forward(p, &x);
        let s = silu_map(&a);
        let mut h = self.conv.forward(p, &s);
        let proj = self.temb.forward(p, temb);
        let nv = h.voxels();
        for (c, &v) in proj.iter().enumerate() {
            h.data[c * nv..(c + 1) * nv]
                .iter_mut()
                .for_each(|e| *e += v);
        }
        match &self.skip {
            Some(k) => h.add_assign(&k.forward(p, &x)),
            None => h.add_assign(&x),
        }
        (h, BlockTape { x, gn, a, s })
    }

    /// Returns the input gradient; adds the embedding gradient to `dtemb`.
    fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        t: BlockTape,
        dy: &Fmap,
        temb: &[f64],
        dtemb: &mut [f64],
    ) -> Fmap {
        let mut dx = match &self.skip {
            Some(k) => k.backward(p, g, &t.x, dy, true).unwrap(),
            None => dy.clone(),
        };
        let dproj: Vec<f64> = (0..dy.c).map(|c| dy.channel(c).iter().sum()).collect();
        for (a, b) in dtemb.iter_mut().zip(self.temb.backward(p, g, temb, &dproj)) {
            *a += b;
        }
        let ds = self.conv.backward(p, g, &t.s, dy, true).unwrap();
        let da = silu_backward(&t.a, &ds);
        dx.add_assign(&self.gn.backward(p, g, &t.gn, &da));
        dx
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    stem: Conv3,
    t1: Linear,
    t2: Linear,
    down: Vec<ResBlock>,
    mid: ResBlock,
    /// Decoder blocks indexed by level (0 = full resolution).
    up: Vec<ResBlock>,
    out_gn: GroupNorm,
    out_conv: Conv3,
    init: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    x: Fmap,
    temb_raw: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
    temb: Vec<f64>,
    temb_act: Vec<f64>,
    down: Vec<BlockTape>,
    mid: BlockTape,
    up: Vec<BlockTape>,
    skip_c: Vec<usize>,
    out_gn: GnTape,
    out_a: Fmap,
    out_s: Fmap,
}

pub struct Forward {
    pub eps: Fmap,
    pub bottleneck: Fmap,
    pub tape: Tape,
}

impl UNet {
    /// Builds the layer layout; `seed` only drives the initial parameters.
    pub fn new(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::default();
        let w = &cfg.widths;
        let stem = Conv3::new(&mut pb, 1, w[0], 3, &mut rng);
        let t1 = Linear::new(&mut pb, cfg.time_embed_dim, cfg.time_dim, &mut rng);
        let t2 = Linear::new(&mut pb, cfg.time_dim, cfg.time_dim, &mut rng);
        let mut down = Vec::new();
        let mut cin = w[0];
        for &wi in w {
            down.push(ResBlock::new(&mut pb, cin, wi, cfg, &mut rng));
            cin = wi;
        }
        let mid = ResBlock::new(&mut pb, cin, BOTTLENECK_CHANNELS, cfg, &mut rng);
        let mut up = Vec::new();
        for i in 0..w.len() {
            let from_below = if i + 1 < w.len() {
                w[i + 1]
            } else {
                BOTTLENECK_CHANNELS
            };
            up.push(ResBlock::new(
                &mut pb,
                from_below + w[i],
                w[i],
                cfg,
                &mut rng,
            ));
        }
        let out_gn = GroupNorm::new(&mut pb, w[0], cfg.groups);
        let out_conv = Conv3::new(&mut pb, w[0], 1, 3, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            t1,
            t2,
            down,
            mid,
            up,
            out_gn,
            out_conv,
            init: pb.init,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.init.len()
    }

    pub fn init_params(&self) -> Vec<f64> {
        self.init.clone()
    }

    fn check_input(&self, p: &[f64], x: &Fmap) -> Result<()> {
        if x.c != 1 || x.d != self.cfg.side {
            return Err(Error::shape(format!(
                "denoiser expects 1 x {s}^3 input, got {} x {}^3",
                x.c,
                x.d,
                s = self.cfg.side
            )));
        }
        if p.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        Ok(())
    }

    fn time(&self, p: &[f64], t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let raw = timestep_embedding(t, self.cfg.time_embed_dim);
        let h1 = self.t1.forward(p, &raw);
        let a1: Vec<f64> = h1.iter().map(|&v| silu(v)).collect();
        let temb = self.t2.forward(p, &a1);
        let act = temb.iter().map(|&v| silu(v)).collect();
        (raw, h1, a1, temb, act)
    }

    /// Encoder and bottleneck only.
    pub fn encode(&self, p: &[f64], x: &Fmap, t: f64) -> Result<Fmap> {
        self.check_input(p, x)?;
        let (.., act) = self.time(p, t);
        let mut h = self.stem.forward(p, x);
        for b in &self.down {
            h = avg_pool2(&b.forward(p, h, &act).0);
        }
        Ok(self.mid.forward(p, h, &act).0)
    }

    pub fn forward(&self, p: &[f64], x: &Fmap, t: f64) -> Result<Forward> {
        self.check_input(p, x)?;
        let (temb_raw, h1, a1, temb, temb_act) = self.time(p, t);
        let mut h = self.stem.forward(p, x);
        let mut skips = Vec::new();
        let mut down = Vec::new();
        for b in &self.down {
            let (o, tp) = b.forward(p, h, &temb_act);
            h = avg_pool2(&o);
            skips.push(o);
            down.push(tp);
        }
        let (f, mid) = self.mid.forward(p, h, &temb_act);
        let bottleneck = f.clone();
        let mut h = f;
        let mut up: Vec<Option<BlockTape>> = (0..self.up.len()).map(|_| None).collect();
        let mut skip_c = vec![0; self.up.len()];
        for i in (0..self.up.len()).rev() {
            let u = up2(&h);
            skip_c[i] = u.c;
            let (o, tp) = self.up[i].forward(p, concat(&u, &skips[i]), &temb_act);
            up[i] = Some(tp);
            h = o;
        }
        let (out_a, out_gn) = self.out_gn.forward(p, &h);
        let out_s = silu_map(&out_a);
        let eps = self.out_conv.forward(p, &out_s);
        let tape = Tape {
            x: x.clone(),
            temb_raw,
            h1,
            a1,
            temb,
            temb_act,
            down,
            mid,
            up: up.into_iter().map(Option::unwrap).collect(),
            skip_c,
            out_gn,
            out_a,
            out_s,
        };
        Ok(Forward {
            eps,
            bottleneck,
            tape,
        })
    }

    /// Accumulates into `g` the gradient of a loss with gradient `deps` at
    /// the output and optional extra gradient `dbottleneck` at the
    /// bottleneck.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        tape: Tape,
        deps: &Fmap,
        dbottleneck: Option<&Fmap>,
    ) {
        let act = &tape.temb_act;
        let mut dact = vec![0.0; act.len()];
        let ds = self
            .out_conv
            .backward(p, g, &tape.out_s, deps, true)
            .unwrap();
        let da = silu_backward(&tape.out_a, &ds);
        let mut dh = self.out_gn.backward(p, g, &tape.out_gn, &da);
        let mut dskips = Vec::new();
        for (i, tp) in tape.up.into_iter().enumerate() {
            let dcat = self.up[i].backward(p, g, tp, &dh, act, &mut dact);
            let (du, ds) = split(&dcat, tape.skip_c[i]);
            dskips.push(ds);
            dh = up2_backward(&du);
        }
        if let Some(extra) = dbottleneck {
            dh.add_assign(extra);
        }
        dh = self.mid.backward(p, g, tape.mid, &dh, act, &mut dact);
        for (i, tp) in tape.down.into_iter().enumerate().rev() {
            let mut d = avg_pool2_backward(&dh);
            d.add_assign(&dskips[i]);
            dh = self.down[i].backward(p, g, tp, &d, act, &mut dact);
        }
        self.stem.backward(p, g, &tape.x, &dh, false);
        let dtemb: Vec<f64> = dact
            .iter()
            .zip(&tape.temb)
            .map(|(d, &v)| d * silu_grad(v))
            .collect();
        let da1 = self.t2.backward(p, g, &tape.a1, &dtemb);
        let dh1: Vec<f64> = da1
            .iter()
            .zip(&tape.h1)
            .map(|(d, &v)| d * silu_grad(v))
            .collect();
        self.t1.backward(p, g, &tape.temb_raw, &dh1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> UNetConfig {
        UNetConfig {
            side: 8,
            widths: vec![4, 8],
            groups: 2,
            time_embed_dim: 8,
            time_dim: 8,
        }
    }

    #[test]
    fn shapes_and_param_count() {
        let net = UNet::new(&tiny(), 0).unwrap();
        let p = net.init_params();
        let x = Fmap::zeros(1, 8);
        let f = net.forward(&p, &x, 10.0).unwrap();
        assert_eq!((f.eps.c, f.eps.d), (1, 8));
        assert_eq!((f.bottleneck.c, f.bottleneck.d), (256, 2));
        assert_eq!(net.encode(&p, &x, 10.0).unwrap(), f.bottleneck);
        let full = UNet::new(&UNetConfig::default(), 0).unwrap();
        assert!(full.num_params() <= 5_000_000, "{}", full.num_params());
        assert!(net.forward(&p, &Fmap::zeros(1, 4), 0.0).is_err());
    }

    #[test]
    fn bad_side_rejected() {
        let cfg = UNetConfig { side: 10, ..tiny() };
        assert!(UNet::new(&cfg, 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = UNet::new(&tiny(), 5).unwrap();
        let p = net.init_params();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Fmap::from_vec(
            1,
            8,
            (0..512).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let target: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wb: Vec<f64> = (0..256 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Loss mixes the output MSE with a linear functional of the bottleneck.
        let loss = |p: &[f64]| {
            let f = net.forward(p, &x, 37.0).unwrap();
            let mse: f64 = f
                .eps
                .data
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / 512.0;
            mse + f
                .bottleneck
                .data
                .iter()
                .zip(&wb)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * 1e-2
        };
        let f = net.forward(&p, &x, 37.0).unwrap();
        let deps = Fmap::from_vec(
            1,
            8,
            f.eps
                .data
                .iter()
                .zip(&target)
                .map(|(a, b)| 2.0 * (a - b) / 512.0)
                .collect(),
        );
        let db = Fmap::from_vec(256, 2, wb.iter().map(|w| w * 1e-2).collect());
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &mut g, f.tape, &deps, Some(&db));
        let mut checked = 0;
        for _ in 0..60 {
            let i = rng.random_range(0..p.len());
            let h = 1e-5;
            let mut pp = p.clone();
            pp[i] += h;
            let up = loss(&pp);
            pp[i] -= 2.0 * h;
            let dn = loss(&pp);
            let fd = (up - dn) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs());
            if scale < 1e-7 {
                continue;
            }
            assert!(
                (fd - g[i]).abs() / scale < 1e-3,
                "param {i}: fd {fd} vs analytic {}",
                g[i]
            );
            checked += 1;
        }
        assert!(checked > 20);
    }
}
