//! Temporal-convolution U-shaped denoiser over state windows.
//!
//! Input windows are `[batch, channels, time]` with channels = state dims.
//! The diffusion step enters through a sinusoidal embedding and the
//! hierarchy level (when more than one level exists) through a small MLP
//! over a one-hot encoding; both are injected into every residual block as
//! per-channel biases.
//!
//! The network is fully convolutional along time: resolution halving only
//! happens where the current length is even and long enough, so one set of
//! weights serves every window length that shows up across hierarchy levels.

use crate::graph::{Graph, Var};
use crate::kernels;
use crate::nn::{
    init_conv_weight, one_hot, sinusoidal_embedding, Activation, Mlp, ParameterSet,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct UnetConfig {
    /// Channels per state element (the state dimension).
    pub in_channels: usize,
    /// Width at the finest resolution; doubles each level down.
    pub base_width: usize,
    /// Number of resolutions (1 = no down/up sampling).
    pub resolutions: usize,
    /// Odd convolution kernel length.
    pub kernel: usize,
    /// Diffusion-step / level embedding size (even).
    pub embed_dim: usize,
    /// Hierarchy levels; a level embedding exists iff `levels > 1`.
    pub levels: usize,
    /// Group-norm group count; must divide `base_width`.
    pub groups: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            in_channels: 4,
            base_width: 32,
            resolutions: 3,
            kernel: 5,
            embed_dim: 32,
            levels: 1,
            groups: 8,
        }
    }
}

struct ResBlockSpec {
    name: String,
    c_in: usize,
    c_out: usize,
}

/// The denoiser network. Parameter tensors live in a [`ParameterSet`];
/// this struct only holds the wiring.
pub struct TemporalUnet {
    pub cfg: UnetConfig,
    time_mlp: Mlp,
    level_mlp: Option<Mlp>,
    blocks_in: ResBlockSpec,
    blocks_down: Vec<ResBlockSpec>,
    block_mid: ResBlockSpec,
    blocks_up: Vec<ResBlockSpec>,
    block_out: ResBlockSpec,
}

impl TemporalUnet {
    pub fn new(params: &mut ParameterSet, cfg: UnetConfig, rng: &mut RngStream) -> Self {
        assert!(cfg.kernel % 2 == 1, "kernel must be odd");
        assert!(cfg.embed_dim % 2 == 0, "embed dim must be even");
        assert!(cfg.base_width % cfg.groups == 0, "groups must divide base width");
        assert!(cfg.resolutions >= 1 && cfg.levels >= 1);

        let e = cfg.embed_dim;
        let time_mlp = Mlp::new(params, "temb", &[e, e, e], Activation::Silu, rng);
        let level_mlp = (cfg.levels > 1)
            .then(|| Mlp::new(params, "lemb", &[cfg.levels, e, e], Activation::Silu, rng));

        let widths: Vec<usize> = (0..cfg.resolutions).map(|i| cfg.base_width << i).collect();
        let mut make = |name: String, c_in: usize, c_out: usize| {
            init_res_block(params, &name, c_in, c_out, &cfg, rng);
            ResBlockSpec { name, c_in, c_out }
        };

        let blocks_in = make("in".into(), cfg.in_channels, widths[0]);
        let mut blocks_down = Vec::new();
        for i in 0..cfg.resolutions - 1 {
            blocks_down.push(make(format!("down{i}"), widths[i], widths[i + 1]));
        }
        let last = *widths.last().unwrap();
        let block_mid = make("mid".into(), last, last);
        let mut blocks_up = Vec::new();
        for i in (0..cfg.resolutions - 1).rev() {
            blocks_up.push(make(format!("up{i}"), 2 * widths[i + 1], widths[i]));
        }
        let block_out = make("out".into(), widths[0], widths[0]);
        // zero-initialized head: the untrained net predicts zero noise,
        // which keeps early reverse chains bounded
        params.insert(
            "head.w",
            Tensor::zeros(&[cfg.in_channels, widths[0], 1]),
        );
        params.insert("head.b", Tensor::zeros(&[cfg.in_channels]));

        TemporalUnet {
            cfg,
            time_mlp,
            level_mlp,
            blocks_in,
            blocks_down,
            block_mid,
            blocks_up,
            block_out,
        }
    }

    /// Which down stages actually halve time for a window of length `t`.
    fn resolution_plan(&self, mut t: usize) -> Vec<bool> {
        let mut plan = Vec::with_capacity(self.cfg.resolutions.saturating_sub(1));
        for _ in 0..self.cfg.resolutions.saturating_sub(1) {
            if t % 2 == 0 && t >= 4 {
                plan.push(true);
                t /= 2;
            } else {
                plan.push(false);
            }
        }
        plan
    }

    fn groups_for(&self, channels: usize) -> usize {
        self.cfg.groups.min(channels)
    }

    fn embedding_inputs(&self, steps: &[usize], level: usize) -> (Tensor, Option<Tensor>) {
        let t_in = sinusoidal_embedding(steps, self.cfg.embed_dim);
        let l_in = self
            .level_mlp
            .as_ref()
            .map(|_| one_hot(&vec![level - 1; steps.len()], self.cfg.levels));
        (t_in, l_in)
    }

    // ── graph path (training, guidance) ──────────────────────────────

    /// Predict noise for a batch of windows `[b, c, t]` at per-sample
    /// diffusion steps, recording operations for backward.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        x: Var,
        steps: &[usize],
        level: usize,
    ) -> Result<Var> {
        let t_len = g.shape(x)[2];
        let plan = self.resolution_plan(t_len);
        let (t_in, l_in) = self.embedding_inputs(steps, level);

        let t_in = g.leaf(t_in);
        let mut emb = self.time_mlp.forward(g, params, t_in)?;
        if let (Some(mlp), Some(l_in)) = (&self.level_mlp, l_in) {
            let l_in = g.leaf(l_in);
            let lv = mlp.forward(g, params, l_in)?;
            emb = g.add(emb, lv)?;
        }

        let mut h = self.res_block_graph(g, params, &self.blocks_in, x, emb)?;
        let mut skips = Vec::new();
        for (i, block) in self.blocks_down.iter().enumerate() {
            h = self.res_block_graph(g, params, block, h, emb)?;
            skips.push(h);
            if plan[i] {
                h = g.downsample2(h)?;
            }
        }
        h = self.res_block_graph(g, params, &self.block_mid, h, emb)?;
        for (rev, block) in self.blocks_up.iter().enumerate() {
            let i = self.cfg.resolutions - 2 - rev;
            if plan[i] {
                h = g.upsample2(h)?;
            }
            h = g.concat(&[h, skips[i]], 1)?;
            h = self.res_block_graph(g, params, block, h, emb)?;
        }
        h = self.res_block_graph(g, params, &self.block_out, h, emb)?;
        let w = params.var(g, "head.w");
        let b = params.var(g, "head.b");
        let mut out = g.conv1d(h, w)?;
        let b = g.reshape(b, &[self.cfg.in_channels, 1])?;
        out = g.add(out, b)?;
        Ok(out)
    }

    fn res_block_graph(
        &self,
        g: &mut Graph,
        params: &ParameterSet,
        spec: &ResBlockSpec,
        x: Var,
        emb: Var,
    ) -> Result<Var> {
        let name = &spec.name;
        let groups = self.groups_for(spec.c_out);
        let w1 = params.var(g, &format!("{name}.conv1.w"));
        let b1 = params.var(g, &format!("{name}.conv1.b"));
        let mut h = g.conv1d(x, w1)?;
        let b1 = g.reshape(b1, &[spec.c_out, 1])?;
        h = g.add(h, b1)?;
        let ga1 = params.var(g, &format!("{name}.gn1.g"));
        let be1 = params.var(g, &format!("{name}.gn1.b"));
        h = g.group_norm(h, ga1, be1, groups, 1e-5)?;
        h = g.silu(h);

        let ew = params.var(g, &format!("{name}.emb.w"));
        let eb = params.var(g, &format!("{name}.emb.b"));
        let mut e = g.matmul(emb, ew)?;
        e = g.add(e, eb)?;
        let batch = g.shape(e)[0];
        let e = g.reshape(e, &[batch, spec.c_out, 1])?;
        h = g.add(h, e)?;

        let w2 = params.var(g, &format!("{name}.conv2.w"));
        let b2 = params.var(g, &format!("{name}.conv2.b"));
        let mut h2 = g.conv1d(h, w2)?;
        let b2 = g.reshape(b2, &[spec.c_out, 1])?;
        h2 = g.add(h2, b2)?;
        let ga2 = params.var(g, &format!("{name}.gn2.g"));
        let be2 = params.var(g, &format!("{name}.gn2.b"));
        h2 = g.group_norm(h2, ga2, be2, groups, 1e-5)?;
        h2 = g.silu(h2);

        let skip = if spec.c_in == spec.c_out {
            x
        } else {
            let sw = params.var(g, &format!("{name}.skip.w"));
            g.conv1d(x, sw)?
        };
        g.add(h2, skip)
    }

    // ── inference path (sampling, rollout control) ───────────────────

    /// Same computation as [`TemporalUnet::forward`] without a tape.
    pub fn infer(
        &self,
        params: &ParameterSet,
        x: &Tensor,
        steps: &[usize],
        level: usize,
    ) -> Result<Tensor> {
        let shape = x.shape();
        let (batch, t_len) = (shape[0], shape[2]);
        let plan = self.resolution_plan(t_len);
        let (t_in, l_in) = self.embedding_inputs(steps, level);

        let mut emb = self.time_mlp.infer(params, &t_in)?;
        if let (Some(mlp), Some(l_in)) = (&self.level_mlp, l_in) {
            let lv = mlp.infer(params, &l_in)?;
            let data: Vec<f64> = emb
                .data()
                .iter()
                .zip(lv.data())
                .map(|(a, b)| a + b)
                .collect();
            emb = Tensor::from_vec(emb.shape(), data)?;
        }

        let mut h = self.res_block_infer(params, &self.blocks_in, x.data(), batch, t_len, &emb);
        let mut t_cur = t_len;
        let mut skips: Vec<(Vec<f64>, usize)> = Vec::new();
        for (i, block) in self.blocks_down.iter().enumerate() {
            h = self.res_block_infer(params, block, &h, batch, t_cur, &emb);
            skips.push((h.clone(), t_cur));
            if plan[i] {
                h = kernels::downsample2(&h, batch * block.c_out, t_cur);
                t_cur /= 2;
            }
        }
        h = self.res_block_infer(params, &self.block_mid, &h, batch, t_cur, &emb);
        for (rev, block) in self.blocks_up.iter().enumerate() {
            let i = self.cfg.resolutions - 2 - rev;
            let (skip, skip_t) = &skips[i];
            let c_half = block.c_in / 2;
            if plan[i] {
                h = kernels::upsample2(&h, batch * c_half, t_cur);
                t_cur *= 2;
            }
            debug_assert_eq!(t_cur, *skip_t);
            // concat along channels
            let mut joined = vec![0.0; batch * block.c_in * t_cur];
            for bi in 0..batch {
                let dst = &mut joined[bi * block.c_in * t_cur..(bi + 1) * block.c_in * t_cur];
                dst[..c_half * t_cur]
                    .copy_from_slice(&h[bi * c_half * t_cur..(bi + 1) * c_half * t_cur]);
                dst[c_half * t_cur..]
                    .copy_from_slice(&skip[bi * c_half * t_cur..(bi + 1) * c_half * t_cur]);
            }
            h = self.res_block_infer(params, block, &joined, batch, t_cur, &emb);
        }
        h = self.res_block_infer(params, &self.block_out, &h, batch, t_cur, &emb);

        let head_w = params.get("head.w");
        let head_b = params.get("head.b");
        let c0 = self.block_out.c_out;
        let mut out = kernels::conv1d(&h, head_w.data(), batch, c0, t_cur, self.cfg.in_channels, 1);
        for bi in 0..batch {
            for c in 0..self.cfg.in_channels {
                let row = &mut out[(bi * self.cfg.in_channels + c) * t_cur..][..t_cur];
                for v in row.iter_mut() {
                    *v += head_b.data()[c];
                }
            }
        }
        Tensor::from_vec(&[batch, self.cfg.in_channels, t_len], out)
    }

    fn res_block_infer(
        &self,
        params: &ParameterSet,
        spec: &ResBlockSpec,
        x: &[f64],
        batch: usize,
        t: usize,
        emb: &Tensor,
    ) -> Vec<f64> {
        let name = &spec.name;
        let groups = self.groups_for(spec.c_out);
        let get = |suffix: &str| params.get(&format!("{name}.{suffix}"));

        let mut h = kernels::conv1d(x, get("conv1.w").data(), batch, spec.c_in, t, spec.c_out, self.cfg.kernel);
        add_channel_bias(&mut h, get("conv1.b").data(), batch, spec.c_out, t);
        let (mut h2, _) = kernels::group_norm(
            &h,
            get("gn1.g").data(),
            get("gn1.b").data(),
            batch,
            spec.c_out,
            t,
            groups,
            1e-5,
        );
        h2 = kernels::silu(&h2);

        // per-channel bias from the embedding
        let e = kernels::matmul(emb.data(), get("emb.w").data(), batch, self.cfg.embed_dim, spec.c_out);
        for bi in 0..batch {
            for c in 0..spec.c_out {
                let bias = e[bi * spec.c_out + c] + get("emb.b").data()[c];
                let row = &mut h2[(bi * spec.c_out + c) * t..][..t];
                for v in row.iter_mut() {
                    *v += bias;
                }
            }
        }

        let mut h3 = kernels::conv1d(&h2, get("conv2.w").data(), batch, spec.c_out, t, spec.c_out, self.cfg.kernel);
        add_channel_bias(&mut h3, get("conv2.b").data(), batch, spec.c_out, t);
        let (mut h4, _) = kernels::group_norm(
            &h3,
            get("gn2.g").data(),
            get("gn2.b").data(),
            batch,
            spec.c_out,
            t,
            groups,
            1e-5,
        );
        h4 = kernels::silu(&h4);

        if spec.c_in == spec.c_out {
            for (o, &xi) in h4.iter_mut().zip(x) {
                *o += xi;
            }
        } else {
            let skip = kernels::conv1d(x, get("skip.w").data(), batch, spec.c_in, t, spec.c_out, 1);
            for (o, s) in h4.iter_mut().zip(skip) {
                *o += s;
            }
        }
        h4
    }
}

fn add_channel_bias(h: &mut [f64], bias: &[f64], batch: usize, channels: usize, t: usize) {
    for bi in 0..batch {
        for c in 0..channels {
            let row = &mut h[(bi * channels + c) * t..][..t];
            for v in row.iter_mut() {
                *v += bias[c];
            }
        }
    }
}

fn init_res_block(
    params: &mut ParameterSet,
    name: &str,
    c_in: usize,
    c_out: usize,
    cfg: &UnetConfig,
    rng: &mut RngStream,
) {
    params.insert(&format!("{name}.conv1.w"), init_conv_weight(rng, c_out, c_in, cfg.kernel));
    params.insert(&format!("{name}.conv1.b"), Tensor::zeros(&[c_out]));
    params.insert(&format!("{name}.gn1.g"), Tensor::filled(&[c_out], 1.0));
    params.insert(&format!("{name}.gn1.b"), Tensor::zeros(&[c_out]));
    params.insert(
        &format!("{name}.emb.w"),
        crate::nn::init_weight(rng, cfg.embed_dim, c_out),
    );
    params.insert(&format!("{name}.emb.b"), Tensor::zeros(&[c_out]));
    params.insert(&format!("{name}.conv2.w"), init_conv_weight(rng, c_out, c_out, cfg.kernel));
    params.insert(&format!("{name}.conv2.b"), Tensor::zeros(&[c_out]));
    params.insert(&format!("{name}.gn2.g"), Tensor::filled(&[c_out], 1.0));
    params.insert(&format!("{name}.gn2.b"), Tensor::zeros(&[c_out]));
    if c_in != c_out {
        params.insert(&format!("{name}.skip.w"), init_conv_weight(rng, c_out, c_in, 1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn tiny_cfg(levels: usize) -> UnetConfig {
        UnetConfig {
            in_channels: 3,
            base_width: 8,
            resolutions: 2,
            kernel: 3,
            embed_dim: 8,
            levels,
            groups: 4,
        }
    }

    #[test]
    fn graph_and_infer_paths_agree_exactly() {
        let mut rng = RngStream::new(21, 0);
        let mut params = ParameterSet::new();
        let net = TemporalUnet::new(&mut params, tiny_cfg(3), &mut rng);
        for t_len in [3usize, 4, 6, 8] {
            let x = rng.normal_tensor(&[2, 3, t_len]);
            let steps = vec![5, 17];
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let out = net.forward(&mut g, &params, xv, &steps, 2).unwrap();
            let via_graph = g.value(out).clone();
            let via_infer = net.infer(&params, &x, &steps, 2).unwrap();
            assert_eq!(via_graph, via_infer, "t = {t_len}");
        }
    }

    #[test]
    fn level_embedding_only_with_multiple_levels() {
        let mut rng = RngStream::new(3, 0);
        let mut p1 = ParameterSet::new();
        let _ = TemporalUnet::new(&mut p1, tiny_cfg(1), &mut rng);
        assert!(!p1.names().any(|n| n.starts_with("lemb")));

        let mut rng = RngStream::new(3, 0);
        let mut p3 = ParameterSet::new();
        let _ = TemporalUnet::new(&mut p3, tiny_cfg(3), &mut rng);
        assert!(p3.names().any(|n| n.starts_with("lemb")));
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = RngStream::new(8, 0);
        let mut params = ParameterSet::new();
        let net = TemporalUnet::new(&mut params, tiny_cfg(2), &mut rng);
        let x = rng.normal_tensor(&[5, 3, 7]);
        let out = net.infer(&params, &x, &[1, 2, 3, 4, 5], 1).unwrap();
        assert_eq!(out.shape(), &[5, 3, 7]);
    }

    #[test]
    fn level_conditioning_changes_output() {
        let mut rng = RngStream::new(4, 0);
        let mut params = ParameterSet::new();
        let net = TemporalUnet::new(&mut params, tiny_cfg(3), &mut rng);
        // the head starts at zero so fresh nets predict zero noise; give it
        // weight so conditioning can reach the output
        params.set_value("head.w", init_conv_weight(&mut rng, 3, 8, 1));
        let x = rng.normal_tensor(&[1, 3, 6]);
        let a = net.infer(&params, &x, &[7], 1).unwrap();
        let b = net.infer(&params, &x, &[7], 3).unwrap();
        assert_ne!(a, b);
        let c = net.infer(&params, &x, &[9], 1).unwrap();
        assert_ne!(a, c, "the step embedding reaches the output too");
    }
}
