//! 1D U-Net over the periodic ring.
//!
//! ```text
//! [x_t | cond] --conv3--> level 0 (n)    --2 blocks--+-----------------------+
//!                          avg-pool                   |                       |
//!                         level 1 (n/2)  --2 blocks--+---------+             |
//!                          avg-pool                   |         |             |
//!                         level 2 (n/4)  --2 blocks-- upsample  concat ... concat -- 2 blocks -- GN, SiLU, conv3 --> eps
//! ```
//!
//! Each block is `GN -> SiLU -> conv3 (+ time projection)` with a residual
//! connection (a 1x1 convolution when the channel count changes).

use serde::{Deserialize, Serialize};

use super::ops::{self, GroupNormCache};
use super::real::{gemm, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub level_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: 16,
            level_multipliers: vec![1, 2, 4],
            time_embed_dim: 64,
            groups: 8,
        }
    }
}

impl ArchConfig {
    pub fn levels(&self) -> usize {
        self.level_multipliers.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.base_channels == 0
            || self.time_embed_dim == 0
            || self.groups == 0
            || self.level_multipliers.is_empty()
            || self.level_multipliers.contains(&0)
        {
            return Err(Error::Config("architecture sizes must be positive".into()));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time embedding dimension must be even".into()));
        }
        if !self.base_channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "base channels {} not divisible by {} groups",
                self.base_channels, self.groups
            )));
        }
        let factor = 1usize << (self.levels() - 1);
        if n == 0 || !n.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "grid size {n} not divisible by down-sampling factor {factor}"
            )));
        }
        Ok(())
    }
}

/// Named, contiguous parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub total: usize,
}

impl ParamLayout {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.total;
        self.blocks.push(ParamBlock {
            name,
            shape,
            offset,
            len,
        });
        self.total += len;
        offset
    }
}

/// Weight followed immediately by bias in the flat vector.
#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
}

impl Conv {
    fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), vec![cout, cin, kernel]);
        layout.add(format!("{name}.bias"), vec![cout]);
        Conv { w, cin, cout, kernel }
    }
    fn wlen(&self) -> usize {
        self.cout * self.cin * self.kernel
    }
    fn end(&self) -> usize {
        self.w + self.wlen() + self.cout
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    c: usize,
}

impl Norm {
    fn new(layout: &mut ParamLayout, name: &str, c: usize) -> Self {
        let gamma = layout.add(format!("{name}.gamma"), vec![c]);
        layout.add(format!("{name}.beta"), vec![c]);
        Norm { gamma, c }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    fin: usize,
    fout: usize,
}

impl Linear {
    fn new(layout: &mut ParamLayout, name: &str, fin: usize, fout: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), vec![fout, fin]);
        layout.add(format!("{name}.bias"), vec![fout]);
        Linear { w, fin, fout }
    }
    fn end(&self) -> usize {
        self.w + self.fout * self.fin + self.fout
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm: Norm,
    conv: Conv,
    temb: Linear,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, temb_dim: usize) -> Self {
        let norm = Norm::new(layout, &format!("{name}.norm"), cin);
        let conv = Conv::new(layout, &format!("{name}.conv"), cin, cout, 3);
        let temb = Linear::new(layout, &format!("{name}.time"), temb_dim, cout);
        let skip = (cin != cout).then(|| Conv::new(layout, &format!("{name}.skip"), cin, cout, 1));
        ResBlock { norm, conv, temb, skip }
    }
}

struct BlockTape<T> {
    gn: GroupNormCache<T>,
    pre_act: Vec<T>,
    col: Vec<T>,
    skip_rhs: Option<Vec<T>>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Tape<T> {
    batch: usize,
    emb: Vec<T>,
    time_pre: Vec<T>,
    hidden: Vec<T>,
    in_col: Vec<T>,
    blocks: Vec<BlockTape<T>>,
    out_gn: GroupNormCache<T>,
    out_pre: Vec<T>,
    out_col: Vec<T>,
}

/// Static structure of the network: parameter offsets and channel counts.
#[derive(Debug, Clone)]
pub struct UNet {
    n: usize,
    groups: usize,
    temb_dim: usize,
    channels: Vec<usize>,
    in_conv: Conv,
    time_fc: Linear,
    down: Vec<[ResBlock; 2]>,
    up: Vec<[ResBlock; 2]>,
    out_norm: Norm,
    out_conv: Conv,
    uncond: usize,
    layout: ParamLayout,
}

impl UNet {
    pub fn new(arch: &ArchConfig, n: usize) -> Result<Self> {
        arch.validate(n)?;
        let mut layout = ParamLayout::default();
        let d = arch.time_embed_dim;
        let channels: Vec<usize> = arch.level_multipliers.iter().map(|m| m * arch.base_channels).collect();
        let levels = channels.len();
        let time_fc = Linear::new(&mut layout, "time_mlp", d, d);
        let in_conv = Conv::new(&mut layout, "in_conv", 2, channels[0], 3);
        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 { channels[0] } else { channels[l - 1] };
            let c = channels[l];
            down.push([
                ResBlock::new(&mut layout, &format!("down{l}.block0"), cin, c, d),
                ResBlock::new(&mut layout, &format!("down{l}.block1"), c, c, d),
            ]);
        }
        let mut up = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            let cin = channels[l + 1] + channels[l];
            let c = channels[l];
            up.push([
                ResBlock::new(&mut layout, &format!("up{l}.block0"), cin, c, d),
                ResBlock::new(&mut layout, &format!("up{l}.block1"), c, c, d),
            ]);
        }
        let out_norm = Norm::new(&mut layout, "out_norm", channels[0]);
        let out_conv = Conv::new(&mut layout, "out_conv", channels[0], 1, 3);
        let uncond = layout.add("uncond_label".into(), vec![n]);
        Ok(UNet {
            n,
            groups: arch.groups,
            temb_dim: d,
            channels,
            in_conv,
            time_fc,
            down,
            up,
            out_norm,
            out_conv,
            uncond,
            layout,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn uncond_range(&self) -> std::ops::Range<usize> {
        self.uncond..self.uncond + self.n
    }

    /// Fan-in scaled Gaussian weights, zero biases, unit norm scales,
    /// zero unconditional label. `draw` yields standard normal variates.
    pub fn init<T: Real>(&self, mut draw: impl FnMut() -> f64) -> Vec<T> {
        let mut p = vec![T::zero(); self.layout.total];
        let mut conv = |p: &mut Vec<T>, c: &Conv, gain: f64| {
            let std = gain * (2.0 / (c.cin * c.kernel) as f64).sqrt();
            for v in &mut p[c.w..c.w + c.wlen()] {
                *v = T::lit(std * draw());
            }
        };
        conv(&mut p, &self.in_conv, 1.0);
        for blk in self.down.iter().chain(&self.up).flatten() {
            conv(&mut p, &blk.conv, 1.0);
            if let Some(s) = &blk.skip {
                conv(&mut p, s, 1.0);
            }
        }
        // A small output layer keeps the untrained prediction near zero.
        conv(&mut p, &self.out_conv, 0.1);
        let mut linear = |p: &mut Vec<T>, l: &Linear| {
            let std = (2.0 / l.fin as f64).sqrt();
            for v in &mut p[l.w..l.w + l.fin * l.fout] {
                *v = T::lit(std * draw());
            }
        };
        linear(&mut p, &self.time_fc);
        for blk in self.down.iter().chain(&self.up).flatten() {
            linear(&mut p, &blk.temb);
        }
        for blk in self.down.iter().chain(&self.up).flatten() {
            p[blk.norm.gamma..blk.norm.gamma + blk.norm.c].fill(T::one());
        }
        p[self.out_norm.gamma..self.out_norm.gamma + self.out_norm.c].fill(T::one());
        p
    }

    fn check_inputs<T: Real>(&self, x: &[T], ts: &[usize], cond: &[T], use_cond: &[bool]) -> Result<()> {
        let batch = ts.len();
        if x.len() != batch * self.n || cond.len() != batch * self.n || use_cond.len() != batch {
            return Err(Error::Shape(format!(
                "batch of {batch} needs {} inputs, got x = {}, cond = {}, flags = {}",
                batch * self.n,
                x.len(),
                cond.len(),
                use_cond.len()
            )));
        }
        if !x.iter().chain(cond).all(|v| v.is_finite()) {
            return Err(Error::InvalidState("non-finite network input".into()));
        }
        Ok(())
    }

    /// Predicts the noise for a batch laid out row-major `[sample, grid]`.
    ///
    /// Rows with `use_cond[b] == false` see the learned unconditional label in
    /// place of their condition channel.
    pub fn forward<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        ts: &[usize],
        cond: &[T],
        use_cond: &[bool],
        keep_tape: bool,
    ) -> Result<(Vec<T>, Option<Tape<T>>)> {
        self.check_inputs(x, ts, cond, use_cond)?;
        let batch = ts.len();
        let n = self.n;
        let d = self.temb_dim;

        let emb: Vec<T> = ops::timestep_embedding(ts, d);
        let time_pre = self.linear(params, &self.time_fc, &emb, batch);
        let hidden = ops::silu(&time_pre);

        let mut input = Vec::with_capacity(2 * batch * n);
        input.extend_from_slice(x);
        let label = &params[self.uncond..self.uncond + n];
        for b in 0..batch {
            if use_cond[b] {
                input.extend_from_slice(&cond[b * n..(b + 1) * n]);
            } else {
                input.extend_from_slice(label);
            }
        }
        let (mut h, in_col) = self.conv(params, &self.in_conv, &input, batch, n);

        let levels = self.channels.len();
        let mut block_tapes = Vec::new();
        let mut skips = Vec::with_capacity(levels);
        let mut len = n;
        for l in 0..levels {
            for blk in &self.down[l] {
                let (out, tape) = self.block_forward(params, blk, h, batch, len, &hidden, keep_tape);
                h = out;
                block_tapes.extend(tape);
            }
            if l + 1 < levels {
                skips.push(h.clone());
                h = ops::avg_pool2(&h, self.channels[l] * batch, len);
                len /= 2;
            }
        }
        for l in (0..levels - 1).rev() {
            h = ops::upsample2(&h, self.channels[l + 1] * batch, len);
            len *= 2;
            h.extend_from_slice(&skips[l]);
            for blk in &self.up[l] {
                let (out, tape) = self.block_forward(params, blk, h, batch, len, &hidden, keep_tape);
                h = out;
                block_tapes.extend(tape);
            }
        }
        let c0 = self.channels[0];
        let (out_pre, out_gn) = self.norm(params, &self.out_norm, &h, batch, n);
        let act = ops::silu(&out_pre);
        let (eps, out_col) = self.conv(params, &self.out_conv, &act, batch, n);
        debug_assert_eq!(c0 * batch * n, act.len());

        let tape = keep_tape.then_some(Tape {
            batch,
            emb,
            time_pre,
            hidden,
            in_col,
            blocks: block_tapes,
            out_gn,
            out_pre,
            out_col,
        });
        Ok((eps, tape))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d eps`.
    pub fn backward<T: Real>(&self, params: &[T], tape: Tape<T>, d_eps: &[T], use_cond: &[bool], grads: &mut [T]) {
        let batch = tape.batch;
        let n = self.n;
        let levels = self.channels.len();
        let mut blocks = tape.blocks;
        let mut dhidden = vec![T::zero(); self.temb_dim * batch];

        let dact = self
            .conv_back(params, &self.out_conv, d_eps, &tape.out_col, batch, n, grads, true)
            .expect("input gradient requested");
        let dpre = ops::silu_backward(&dact, &tape.out_pre);
        let mut dh = self.norm_back(params, &self.out_norm, &dpre, &tape.out_gn, batch, n, grads);

        let mut len = n;
        let mut dskips: Vec<Vec<T>> = vec![Vec::new(); levels.saturating_sub(1)];
        for l in 0..levels - 1 {
            for blk in self.up[l].iter().rev() {
                let bt = blocks.pop().expect("tape holds every block");
                dh = self.block_backward(params, blk, dh, bt, batch, len, &tape.hidden, &mut dhidden, grads);
            }
            let split = self.channels[l + 1] * batch * len;
            dskips[l] = dh.split_off(split);
            dh = ops::upsample2_backward(&dh, self.channels[l + 1] * batch, len / 2);
            len /= 2;
        }
        for l in (0..levels).rev() {
            if l + 1 < levels {
                dh = ops::avg_pool2_backward(&dh, self.channels[l] * batch, len * 2);
                len *= 2;
                for (a, b) in dh.iter_mut().zip(&dskips[l]) {
                    *a += *b;
                }
            }
            for blk in self.down[l].iter().rev() {
                let bt = blocks.pop().expect("tape holds every block");
                dh = self.block_backward(params, blk, dh, bt, batch, len, &tape.hidden, &mut dhidden, grads);
            }
        }
        let dinput = self
            .conv_back(params, &self.in_conv, &dh, &tape.in_col, batch, n, grads, true)
            .expect("input gradient requested");
        let dlabel = &mut grads[self.uncond..self.uncond + n];
        for b in 0..batch {
            if !use_cond[b] {
                let row = &dinput[(batch + b) * n..(batch + b + 1) * n];
                for (g, &v) in dlabel.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }

        let dpre_t = ops::silu_backward(&dhidden, &tape.time_pre);
        self.linear_back(params, &self.time_fc, &dpre_t, &tape.emb, batch, grads);
    }

    fn conv<T: Real>(&self, p: &[T], c: &Conv, x: &[T], batch: usize, len: usize) -> (Vec<T>, Vec<T>) {
        let wl = c.wlen();
        ops::conv_forward(
            x,
            c.cin,
            batch,
            len,
            &p[c.w..c.w + wl],
            &p[c.w + wl..c.end()],
            c.cout,
            c.kernel,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_back<T: Real>(
        &self,
        p: &[T],
        c: &Conv,
        dy: &[T],
        rhs: &[T],
        batch: usize,
        len: usize,
        grads: &mut [T],
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let wl = c.wlen();
        let (dw, db) = grads[c.w..c.end()].split_at_mut(wl);
        ops::conv_backward(
            dy,
            rhs,
            &p[c.w..c.w + wl],
            c.cin,
            c.cout,
            c.kernel,
            batch,
            len,
            dw,
            db,
            want_dx,
        )
    }

    fn norm<T: Real>(&self, p: &[T], nm: &Norm, x: &[T], batch: usize, len: usize) -> (Vec<T>, GroupNormCache<T>) {
        ops::group_norm_forward(
            x,
            nm.c,
            batch,
            len,
            self.groups,
            &p[nm.gamma..nm.gamma + nm.c],
            &p[nm.gamma + nm.c..nm.gamma + 2 * nm.c],
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_back<T: Real>(
        &self,
        p: &[T],
        nm: &Norm,
        dy: &[T],
        cache: &GroupNormCache<T>,
        batch: usize,
        len: usize,
        grads: &mut [T],
    ) -> Vec<T> {
        let (dg, db) = grads[nm.gamma..nm.gamma + 2 * nm.c].split_at_mut(nm.c);
        ops::group_norm_backward(
            dy,
            cache,
            nm.c,
            batch,
            len,
            self.groups,
            &p[nm.gamma..nm.gamma + nm.c],
            dg,
            db,
        )
    }

    /// `[fout][batch] = W [fin][batch] + b`.
    fn linear<T: Real>(&self, p: &[T], l: &Linear, x: &[T], batch: usize) -> Vec<T> {
        let wl = l.fin * l.fout;
        let mut y = vec![T::zero(); l.fout * batch];
        for (o, row) in y.chunks_exact_mut(batch).enumerate() {
            row.fill(p[l.w + wl + o]);
        }
        gemm(
            l.fout,
            l.fin,
            batch,
            &p[l.w..l.w + wl],
            false,
            x,
            false,
            T::one(),
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients and returns `d loss / d x`.
    fn linear_back<T: Real>(&self, p: &[T], l: &Linear, dy: &[T], x: &[T], batch: usize, grads: &mut [T]) -> Vec<T> {
        let wl = l.fin * l.fout;
        let (dw, db) = grads[l.w..l.end()].split_at_mut(wl);
        gemm(l.fout, batch, l.fin, dy, false, x, true, T::one(), dw);
        for (o, row) in dy.chunks_exact(batch).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
        let mut dx = vec![T::zero(); l.fin * batch];
        gemm(
            l.fin,
            l.fout,
            batch,
            &p[l.w..l.w + wl],
            true,
            dy,
            false,
            T::zero(),
            &mut dx,
        );
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward<T: Real>(
        &self,
        p: &[T],
        blk: &ResBlock,
        x: Vec<T>,
        batch: usize,
        len: usize,
        hidden: &[T],
        keep_tape: bool,
    ) -> (Vec<T>, Option<BlockTape<T>>) {
        let cout = blk.conv.cout;
        let (pre_act, gn) = self.norm(p, &blk.norm, &x, batch, len);
        let act = ops::silu(&pre_act);
        let (mut h, col) = self.conv(p, &blk.conv, &act, batch, len);
        let proj = self.linear(p, &blk.temb, hidden, batch);
        for co in 0..cout {
            for b in 0..batch {
                let v = proj[co * batch + b];
                for y in &mut h[(co * batch + b) * len..(co * batch + b + 1) * len] {
                    *y += v;
                }
            }
        }
        let skip_rhs = match &blk.skip {
            Some(sk) => {
                let (s, rhs) = self.conv(p, sk, &x, batch, len);
                for (a, b) in h.iter_mut().zip(&s) {
                    *a += *b;
                }
                Some(rhs)
            }
            None => {
                for (a, b) in h.iter_mut().zip(&x) {
                    *a += *b;
                }
                None
            }
        };
        let tape = keep_tape.then_some(BlockTape {
            gn,
            pre_act,
            col,
            skip_rhs,
        });
        (h, tape)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward<T: Real>(
        &self,
        p: &[T],
        blk: &ResBlock,
        dout: Vec<T>,
        tape: BlockTape<T>,
        batch: usize,
        len: usize,
        hidden: &[T],
        dhidden: &mut [T],
        grads: &mut [T],
    ) -> Vec<T> {
        let cout = blk.conv.cout;
        let mut dproj = vec![T::zero(); cout * batch];
        for co in 0..cout {
            for b in 0..batch {
                dproj[co * batch + b] = dout[(co * batch + b) * len..(co * batch + b + 1) * len]
                    .iter()
                    .copied()
                    .sum();
            }
        }
        let dh_t = self.linear_back(p, &blk.temb, &dproj, hidden, batch, grads);
        for (a, b) in dhidden.iter_mut().zip(&dh_t) {
            *a += *b;
        }
        let dact = self
            .conv_back(p, &blk.conv, &dout, &tape.col, batch, len, grads, true)
            .expect("input gradient requested");
        let dpre = ops::silu_backward(&dact, &tape.pre_act);
        let mut dx = self.norm_back(p, &blk.norm, &dpre, &tape.gn, batch, len, grads);
        match (&blk.skip, tape.skip_rhs) {
            (Some(sk), Some(rhs)) => {
                let ds = self
                    .conv_back(p, sk, &dout, &rhs, batch, len, grads, true)
                    .expect("input gradient requested");
                for (a, b) in dx.iter_mut().zip(&ds) {
                    *a += *b;
                }
            }
            _ => {
                for (a, b) in dx.iter_mut().zip(&dout) {
                    *a += *b;
                }
            }
        }
        dx
    }
}
