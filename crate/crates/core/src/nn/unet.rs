//! U-shaped noise-prediction network with time-conditioned residual blocks.

use serde::{Deserialize, Serialize};

use super::layers::*;
use super::{Act, ParamStore, Real};
use crate::error::{DalError, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Channels per resolution level; the image is halved between levels.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub temb_dim: usize,
    pub groups: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            channels: vec![32, 64, 128],
            blocks_per_level: 2,
            temb_dim: 64,
            groups: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.blocks_per_level == 0 {
            return Err(DalError::invalid("network needs at least one level and one block"));
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            return Err(DalError::invalid("time embedding dimension must be even and >= 2"));
        }
        for &c in &self.channels {
            if c == 0 || c % self.groups.min(c).max(1) != 0 {
                return Err(DalError::invalid(format!(
                    "{c} channels cannot be split into {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Images must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    emb: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

struct ResCache<T> {
    x: Act<T>,
    gn1: GroupNormCache<T>,
    a1: Act<T>,
    s1: Act<T>,
    gn2: GroupNormCache<T>,
    g2: Act<T>,
    ss: Mat<T>,
    m: Act<T>,
    s2: Act<T>,
}

impl ResBlock {
    fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        arch: &ArchConfig,
        rng: &mut Rng,
    ) -> Self {
        let tdim = 2 * arch.temb_dim;
        ResBlock {
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), cin, arch.groups),
            conv1: Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, rng, false),
            emb: Linear::new(ps, &format!("{name}.emb"), tdim, 2 * cout, rng, true),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), cout, arch.groups),
            conv2: Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, rng, true),
            skip: (cin != cout).then(|| Conv::new(ps, &format!("{name}.skip"), cin, cout, 1, rng, false)),
        }
    }

    fn forward<T: Real>(&self, p: &[T], x: Act<T>, temb: &Mat<T>) -> (Act<T>, ResCache<T>) {
        let (a1, gn1) = self.gn1.forward(p, &x);
        let s1 = silu_act(&a1);
        let h1 = self.conv1.forward(p, &s1);
        let (g2, gn2) = self.gn2.forward(p, &h1);
        let ss = self.emb.forward(p, temb);
        let m = modulate(&g2, &ss);
        let s2 = silu_act(&m);
        let mut out = self.conv2.forward(p, &s2);
        match &self.skip {
            Some(skip) => out.add_assign(&skip.forward(p, &x)),
            None => out.add_assign(&x),
        }
        (
            out,
            ResCache {
                x,
                gn1,
                a1,
                s1,
                gn2,
                g2,
                ss,
                m,
                s2,
            },
        )
    }

    /// Returns the input gradient; the time-embedding gradient is added to
    /// `dtemb`.
    fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        c: ResCache<T>,
        temb: &Mat<T>,
        dout: &Act<T>,
        dtemb: &mut Mat<T>,
    ) -> Act<T> {
        let ds2 = self.conv2.backward(p, g, &c.s2, dout);
        let dm = silu_act_backward(&c.m, &ds2);
        let (dg2, dss) = modulate_backward(&c.g2, &c.ss, &dm);
        let dt = self.emb.backward(p, g, temb, &dss);
        for (a, b) in dtemb.data.iter_mut().zip(&dt.data) {
            *a += *b;
        }
        let dh1 = self.gn2.backward(p, g, &c.gn2, &dg2);
        let ds1 = self.conv1.backward(p, g, &c.s1, &dh1);
        let da1 = silu_act_backward(&c.a1, &ds1);
        let mut dx = self.gn1.backward(p, g, &c.gn1, &da1);
        match &self.skip {
            Some(skip) => dx.add_assign(&skip.backward(p, g, &c.x, dout)),
            None => dx.add_assign(dout),
        }
        dx
    }
}

#[derive(Clone, Debug)]
enum DownOp {
    Res(ResBlock),
    Pool,
}

#[derive(Clone, Debug)]
enum UpOp {
    /// Block consuming a concatenated skip; holds the channel count of the
    /// non-skip part of its input.
    Res(ResBlock, usize),
    Upsample,
}

/// Network structure; parameters are held separately in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct UNet {
    pub arch: ArchConfig,
    t_lin1: Linear,
    t_lin2: Linear,
    in_conv: Conv,
    down: Vec<DownOp>,
    mid: ResBlock,
    up: Vec<UpOp>,
    out_gn: GroupNorm,
    out_conv: Conv,
}

enum DownCache<T> {
    Res(ResCache<T>),
    Pool,
}

enum UpCache<T> {
    Res(ResCache<T>),
    Upsample,
}

pub struct UNetTape<T> {
    t0: Mat<T>,
    t1: Mat<T>,
    t1s: Mat<T>,
    t2: Mat<T>,
    temb: Mat<T>,
    x: Act<T>,
    down: Vec<DownCache<T>>,
    mid: ResCache<T>,
    up: Vec<UpCache<T>>,
    out_gn: GroupNormCache<T>,
    out_a: Act<T>,
    out_s: Act<T>,
}

fn silu_mat<T: Real>(m: &Mat<T>) -> Mat<T> {
    Mat {
        rows: m.rows,
        cols: m.cols,
        data: silu(&m.data),
    }
}

fn silu_mat_backward<T: Real>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: silu_backward(&x.data, &dy.data),
    }
}

impl UNet {
    pub fn new<T: Real>(arch: &ArchConfig, rng: &mut Rng) -> Result<(Self, ParamStore<T>)> {
        arch.validate()?;
        let mut ps = ParamStore::new();
        let tdim = 2 * arch.temb_dim;
        let t_lin1 = Linear::new(&mut ps, "temb.lin1", arch.temb_dim, tdim, rng, false);
        let t_lin2 = Linear::new(&mut ps, "temb.lin2", tdim, tdim, rng, false);
        let c0 = arch.channels[0];
        let in_conv = Conv::new(&mut ps, "in", 1, c0, 3, rng, false);
        let levels = arch.channels.len();
        let mut down = Vec::new();
        let mut c = c0;
        let mut skip_channels = Vec::new();
        for (l, &cl) in arch.channels.iter().enumerate() {
            for j in 0..arch.blocks_per_level {
                down.push(DownOp::Res(ResBlock::new(
                    &mut ps,
                    &format!("down{l}.{j}"),
                    c,
                    cl,
                    arch,
                    rng,
                )));
                c = cl;
                skip_channels.push(cl);
            }
            if l + 1 < levels {
                down.push(DownOp::Pool);
            }
        }
        let mid = ResBlock::new(&mut ps, "mid", c, c, arch, rng);
        let mut up = Vec::new();
        for (l, &cl) in arch.channels.iter().enumerate().rev() {
            for j in 0..arch.blocks_per_level {
                let cs = skip_channels.pop().expect("one skip per down block");
                up.push(UpOp::Res(
                    ResBlock::new(&mut ps, &format!("up{l}.{j}"), c + cs, cl, arch, rng),
                    c,
                ));
                c = cl;
            }
            if l > 0 {
                up.push(UpOp::Upsample);
            }
        }
        let out_gn = GroupNorm::new(&mut ps, "out.gn", c, arch.groups);
        let out_conv = Conv::new(&mut ps, "out.conv", c, 1, 3, rng, true);
        Ok((
            UNet {
                arch: arch.clone(),
                t_lin1,
                t_lin2,
                in_conv,
                down,
                mid,
                up,
                out_gn,
                out_conv,
            },
            ps,
        ))
    }

    pub fn check_input<T: Real>(&self, x: &Act<T>) -> Result<()> {
        let m = self.arch.size_multiple();
        if x.c != 1 || x.h != x.w || x.h % m != 0 || x.h == 0 {
            return Err(DalError::invalid(format!(
                "network input must be 1 x {m}k x {m}k, got {} x {} x {}",
                x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    /// `x` is `(1, B, d, d)`, `ts` holds one timestep per sample.
    pub fn forward<T: Real>(&self, p: &[T], x: &Act<T>, ts: &[f64]) -> (Act<T>, UNetTape<T>) {
        debug_assert_eq!(ts.len(), x.b);
        let t0 = timestep_embedding::<T>(ts, self.arch.temb_dim);
        let t1 = self.t_lin1.forward(p, &t0);
        let t1s = silu_mat(&t1);
        let t2 = self.t_lin2.forward(p, &t1s);
        let temb = silu_mat(&t2);

        let mut h = self.in_conv.forward(p, x);
        let mut skips = Vec::new();
        let mut down = Vec::with_capacity(self.down.len());
        for op in &self.down {
            match op {
                DownOp::Res(block) => {
                    let (out, cache) = block.forward(p, h, &temb);
                    skips.push(out.clone());
                    h = out;
                    down.push(DownCache::Res(cache));
                }
                DownOp::Pool => {
                    h = avg_pool2(&h);
                    down.push(DownCache::Pool);
                }
            }
        }
        let (out, mid) = self.mid.forward(p, h, &temb);
        h = out;
        let mut up = Vec::with_capacity(self.up.len());
        for op in &self.up {
            match op {
                UpOp::Res(block, _) => {
                    let s = skips.pop().expect("skip available");
                    let (out, cache) = block.forward(p, concat(&h, &s), &temb);
                    h = out;
                    up.push(UpCache::Res(cache));
                }
                UpOp::Upsample => {
                    h = upsample2(&h);
                    up.push(UpCache::Upsample);
                }
            }
        }
        let (out_a, out_gn) = self.out_gn.forward(p, &h);
        let out_s = silu_act(&out_a);
        let y = self.out_conv.forward(p, &out_s);
        (
            y,
            UNetTape {
                t0,
                t1,
                t1s,
                t2,
                temb,
                x: x.clone(),
                down,
                mid,
                up,
                out_gn,
                out_a,
                out_s,
            },
        )
    }

    pub fn predict<T: Real>(&self, p: &[T], x: &Act<T>, ts: &[f64]) -> Act<T> {
        self.forward(p, x, ts).0
    }

    /// Accumulates parameter gradients of `<dy, output>` into `g`.
    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], tape: UNetTape<T>, dy: &Act<T>) {
        let UNetTape {
            t0,
            t1,
            t1s,
            t2,
            temb,
            x,
            down,
            mid,
            up,
            out_gn,
            out_a,
            out_s,
        } = tape;
        let mut dtemb = Mat::zeros(temb.rows, temb.cols);
        let ds = self.out_conv.backward(p, g, &out_s, dy);
        let da = silu_act_backward(&out_a, &ds);
        let mut dh = self.out_gn.backward(p, g, &out_gn, &da);

        let mut dskips = Vec::new();
        for (op, cache) in self.up.iter().zip(up).rev() {
            match (op, cache) {
                (UpOp::Res(block, c_main), UpCache::Res(cache)) => {
                    let dcat = block.backward(p, g, cache, &temb, &dh, &mut dtemb);
                    let (dmain, dskip) = split(&dcat, *c_main);
                    dh = dmain;
                    dskips.push(dskip);
                }
                (UpOp::Upsample, UpCache::Upsample) => dh = upsample2_backward(&dh),
                _ => unreachable!("tape matches network"),
            }
        }
        dh = self.mid.backward(p, g, mid, &temb, &dh, &mut dtemb);
        // skips were consumed last-in first-out, so the backward pass above
        // collected their gradients in the same order the down path made them
        let mut dskips = dskips.into_iter();
        for (op, cache) in self.down.iter().zip(down).rev() {
            match (op, cache) {
                (DownOp::Res(block), DownCache::Res(cache)) => {
                    dh.add_assign(&dskips.next_back().expect("skip gradient"));
                    dh = block.backward(p, g, cache, &temb, &dh, &mut dtemb);
                }
                (DownOp::Pool, DownCache::Pool) => dh = avg_pool2_backward(&dh),
                _ => unreachable!("tape matches network"),
            }
        }
        self.in_conv.backward(p, g, &x, &dh);

        let dt2 = silu_mat_backward(&t2, &dtemb);
        let dt1s = self.t_lin2.backward(p, g, &t1s, &dt2);
        let dt1 = silu_mat_backward(&t1, &dt1s);
        self.t_lin1.backward(p, g, &t0, &dt1);
    }
}
