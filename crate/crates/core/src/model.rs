//! The gated convolutional recurrent network.
//!
//! Three conv blocks, each a linear conv path multiplied by a sigmoid conv
//! gate (`Y = (W∗X+b) ⊙ σ(V∗X+c)`) followed by max pooling, then a
//! bidirectional GRU, then two parallel linear heads over each frame: a
//! sigmoid head giving per-frame class posteriors `O(t)` and a softmax head
//! giving an attention distribution `Z_loc(t)`. Their product `O'(t)`
//! localizes events; the attention-weighted mean
//! `O'' = Σ_t O'(t) / Σ_t Z_loc(t)` is the clip-level posterior trained
//! against weak labels.
//!
//! Task mode only changes pooling: tagging pools (2,2) per block
//! (240 frames → 30), detection pools (1,2) to keep full time resolution.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::FeatureChunk;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hash::fnv1a64;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    Tagging,
    Sed,
}

impl TaskMode {
    /// Per-block max-pool window (time, frequency).
    pub fn pool(self) -> (usize, usize) {
        match self {
            Self::Tagging => (2, 2),
            Self::Sed => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tagging => "tagging",
            Self::Sed => "sed",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tagging" => Some(Self::Tagging),
            "sed" => Some(Self::Sed),
            _ => None,
        }
    }
}

/// How frame posteriors are reduced to one clip posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipPooling {
    /// Attention-weighted: Σ_t O'(t) / Σ_t Z_loc(t) per class.
    Attention,
    /// Plain time average of O(t).
    Mean,
}

impl ClipPooling {
    pub fn name(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "attention" => Some(Self::Attention),
            "mean" => Some(Self::Mean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub frames: usize,
    pub bins: usize,
    pub classes: usize,
    pub filters: usize,
    pub kernel: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub mode: TaskMode,
}

impl ModelConfig {
    pub fn new(mode: TaskMode, classes: usize) -> Self {
        Self {
            frames: 240,
            bins: 64,
            classes,
            filters: 64,
            kernel: 3,
            blocks: 3,
            hidden: 128,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.filters == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("conv kernel size must be odd"));
        }
        let (pt, pf) = self.mode.pool();
        let (mut t, mut f) = (self.frames, self.bins);
        for i in 0..self.blocks {
            if t < pt || f < pf {
                return Err(Error::config(format!(
                    "block {}: {}x{} input smaller than {}x{} pool window",
                    i, t, f, pt, pf
                )));
            }
            t /= pt;
            f /= pf;
        }
        Ok(())
    }

    /// (T', F') after all conv blocks.
    pub fn conv_out_dims(&self) -> (usize, usize) {
        let (pt, pf) = self.mode.pool();
        let (mut t, mut f) = (self.frames, self.bins);
        for _ in 0..self.blocks {
            t /= pt;
            f /= pf;
        }
        (t, f)
    }

    /// Width of each frame vector fed to the GRU: F' bands × filters.
    pub fn gru_input(&self) -> usize {
        self.conv_out_dims().1 * self.filters
    }

    /// Canonical key=value rendering; its hash identifies compatible
    /// checkpoints.
    pub fn canonical_string(&self) -> String {
        format!(
            "frames={} bins={} classes={} filters={} kernel={} blocks={} hidden={} mode={}",
            self.frames,
            self.bins,
            self.classes,
            self.filters,
            self.kernel,
            self.blocks,
            self.hidden,
            self.mode.name()
        )
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }
}

/// One GLU conv block: linear path (w, b) gated by σ(conv(v) + c).
#[derive(Debug, Clone)]
pub struct GatedConvBlock {
    pub w: Tensor,
    pub b: Tensor,
    pub v: Tensor,
    pub c: Tensor,
}

/// Single-direction GRU cell: update gate (wz, uz, bz), reset gate
/// (wr, ur, br), candidate (wh, uh, bh).
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
    pub bh: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub blocks: Vec<GatedConvBlock>,
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
    pub w_loc: Tensor,
    pub b_loc: Tensor,
}

/// Per-frame outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct FramePosteriors {
    /// Sigmoid-head class posteriors, [T', C].
    pub o: Tensor,
    /// Softmax-head attention, [T', C], each row sums to 1.
    pub z_loc: Tensor,
    /// Localization track O ⊙ Z_loc, [T', C].
    pub o_prime: Tensor,
    /// Clip-level posterior, [C].
    pub clip: Tensor,
}

const GRU_PARTS: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"];

impl GruCell {
    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh,
            &self.bh,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wh,
            &mut self.uh,
            &mut self.bh,
        ]
    }
}

impl ModelParams {
    /// Every learnable tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            out.push((format!("block{}.linear.w", i), &blk.w));
            out.push((format!("block{}.linear.b", i), &blk.b));
            out.push((format!("block{}.gate.w", i), &blk.v));
            out.push((format!("block{}.gate.b", i), &blk.c));
        }
        for (dir, cell) in [("fwd", &self.fwd), ("bwd", &self.bwd)] {
            for (part, t) in GRU_PARTS.iter().zip(cell.tensors()) {
                out.push((format!("gru.{}.{}", dir, part), t));
            }
        }
        out.push(("head.cls.w".into(), &self.w_cls));
        out.push(("head.cls.b".into(), &self.b_cls));
        out.push(("head.loc.w".into(), &self.w_loc));
        out.push(("head.loc.b".into(), &self.b_loc));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{}.linear.w", i), &mut blk.w));
            out.push((format!("block{}.linear.b", i), &mut blk.b));
            out.push((format!("block{}.gate.w", i), &mut blk.v));
            out.push((format!("block{}.gate.b", i), &mut blk.c));
        }
        for (dir, cell) in [("fwd", &mut self.fwd), ("bwd", &mut self.bwd)] {
            for (part, t) in GRU_PARTS.iter().zip(cell.tensors_mut()) {
                out.push((format!("gru.{}.{}", dir, part), t));
            }
        }
        out.push(("head.cls.w".into(), &mut self.w_cls));
        out.push(("head.cls.b".into(), &mut self.b_cls));
        out.push(("head.loc.w".into(), &mut self.w_loc));
        out.push(("head.loc.b".into(), &mut self.b_loc));
        out
    }

    /// Rebuild params from named tensors (checkpoint loading). Every tensor
    /// must be present with the shape the config dictates.
    pub fn from_named(
        config: ModelConfig,
        mut tensors: std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor> {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::incompatible(format!("missing parameter {}", name)))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::incompatible(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };

        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let cin = if i == 0 { 1 } else { config.filters };
            let wshape = vec![config.kernel, config.kernel, cin, config.filters];
            blocks.push(GatedConvBlock {
                w: take(format!("block{}.linear.w", i), wshape.clone())?,
                b: take(format!("block{}.linear.b", i), vec![config.filters])?,
                v: take(format!("block{}.gate.w", i), wshape)?,
                c: take(format!("block{}.gate.b", i), vec![config.filters])?,
            });
        }

        let (d, h) = (config.gru_input(), config.hidden);
        let mut cell = |dir: &str| -> Result<GruCell> {
            let mut part = |p: &str, shape: Vec<usize>| take(format!("gru.{}.{}", dir, p), shape);
            Ok(GruCell {
                wz: part("wz", vec![d, h])?,
                uz: part("uz", vec![h, h])?,
                bz: part("bz", vec![h])?,
                wr: part("wr", vec![d, h])?,
                ur: part("ur", vec![h, h])?,
                br: part("br", vec![h])?,
                wh: part("wh", vec![d, h])?,
                uh: part("uh", vec![h, h])?,
                bh: part("bh", vec![h])?,
            })
        };
        let fwd = cell("fwd")?;
        let bwd = cell("bwd")?;

        let params = Self {
            config,
            blocks,
            fwd,
            bwd,
            w_cls: take("head.cls.w".into(), vec![2 * h, config.classes])?,
            b_cls: take("head.cls.b".into(), vec![config.classes])?,
            w_loc: take("head.loc.w".into(), vec![2 * h, config.classes])?,
            b_loc: take("head.loc.b".into(), vec![config.classes])?,
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::incompatible(format!(
                "unexpected parameter {} in checkpoint",
                name
            )));
        }
        Ok(params)
    }
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut glorot = |shape: Vec<usize>, fan_in: usize, fan_out: usize| -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor::from_vec(shape, data).unwrap()
    };

    let k = config.kernel;
    let mut blocks = Vec::with_capacity(config.blocks);
    for i in 0..config.blocks {
        let cin = if i == 0 { 1 } else { config.filters };
        let (fan_in, fan_out) = (k * k * cin, k * k * config.filters);
        blocks.push(GatedConvBlock {
            w: glorot(vec![k, k, cin, config.filters], fan_in, fan_out),
            b: Tensor::zeros(vec![config.filters]),
            v: glorot(vec![k, k, cin, config.filters], fan_in, fan_out),
            c: Tensor::zeros(vec![config.filters]),
        });
    }

    let (d, h) = (config.gru_input(), config.hidden);
    let mut cell = || GruCell {
        wz: glorot(vec![d, h], d, h),
        uz: glorot(vec![h, h], h, h),
        bz: Tensor::zeros(vec![h]),
        wr: glorot(vec![d, h], d, h),
        ur: glorot(vec![h, h], h, h),
        br: Tensor::zeros(vec![h]),
        wh: glorot(vec![d, h], d, h),
        uh: glorot(vec![h, h], h, h),
        bh: Tensor::zeros(vec![h]),
    };
    let fwd = cell();
    let bwd = cell();

    Ok(ModelParams {
        config,
        blocks,
        fwd,
        bwd,
        w_cls: glorot(vec![2 * h, config.classes], 2 * h, config.classes),
        b_cls: Tensor::zeros(vec![config.classes]),
        w_loc: glorot(vec![2 * h, config.classes], 2 * h, config.classes),
        b_loc: Tensor::zeros(vec![config.classes]),
    })
}

// ---- graph construction -----------------------------------------------

struct BlockNodes {
    w: NodeId,
    b: NodeId,
    v: NodeId,
    c: NodeId,
}

struct CellNodes {
    wz: NodeId,
    uz: NodeId,
    bz: NodeId,
    wr: NodeId,
    ur: NodeId,
    br: NodeId,
    wh: NodeId,
    uh: NodeId,
    bh: NodeId,
}

/// Node ids of every parameter inside one graph, in `named()` order.
pub struct ParamNodes {
    blocks: Vec<BlockNodes>,
    fwd: CellNodes,
    bwd: CellNodes,
    w_cls: NodeId,
    b_cls: NodeId,
    w_loc: NodeId,
    b_loc: NodeId,
}

impl ParamNodes {
    /// Group ids in `named()` order (e.g. to pair with gradients).
    pub fn ordered_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend([b.w, b.b, b.v, b.c]);
        }
        for cell in [&self.fwd, &self.bwd] {
            ids.extend([
                cell.wz, cell.uz, cell.bz, cell.wr, cell.ur, cell.br, cell.wh, cell.uh, cell.bh,
            ]);
        }
        ids.extend([self.w_cls, self.b_cls, self.w_loc, self.b_loc]);
        ids
    }

    /// Inverse of `ordered_ids`: adopt existing graph nodes as parameters.
    pub fn from_ordered_ids(config: &ModelConfig, ids: &[NodeId]) -> Result<Self> {
        let expect = config.blocks * 4 + 18 + 4;
        if ids.len() != expect {
            return Err(Error::config(format!(
                "expected {} parameter nodes, got {}",
                expect,
                ids.len()
            )));
        }
        let mut it = ids.iter().copied();
        let mut next = || it.next().unwrap();
        let blocks = (0..config.blocks)
            .map(|_| BlockNodes {
                w: next(),
                b: next(),
                v: next(),
                c: next(),
            })
            .collect();
        let cell = |next: &mut dyn FnMut() -> NodeId| CellNodes {
            wz: next(),
            uz: next(),
            bz: next(),
            wr: next(),
            ur: next(),
            br: next(),
            wh: next(),
            uh: next(),
            bh: next(),
        };
        let fwd = cell(&mut next);
        let bwd = cell(&mut next);
        Ok(Self {
            blocks,
            fwd,
            bwd,
            w_cls: next(),
            b_cls: next(),
            w_loc: next(),
            b_loc: next(),
        })
    }
}

impl ModelParams {
    /// Register every parameter as a borrowed graph leaf.
    pub fn register<'a>(&'a self, g: &mut Graph<'a>) -> ParamNodes {
        let ids: Vec<NodeId> = self.named().iter().map(|(_, t)| g.input(t)).collect();
        ParamNodes::from_ordered_ids(&self.config, &ids).expect("named() matches ordered_ids()")
    }
}

/// Graph node ids of a full forward pass.
pub struct ForwardNodes {
    pub o: NodeId,
    pub z_loc: NodeId,
    pub o_prime: NodeId,
    pub clip: NodeId,
}

fn glu_block_nodes(
    g: &mut Graph,
    x: NodeId,
    blk: &BlockNodes,
    pool: (usize, usize),
) -> Result<NodeId> {
    let lin = g.conv2d_same(x, blk.w, blk.b)?;
    let gate_pre = g.conv2d_same(x, blk.v, blk.c)?;
    let gate = g.sigmoid(gate_pre);
    let gated = g.mul(lin, gate)?;
    Ok(g.max_pool2d(gated, pool.0, pool.1)?)
}

fn gru_direction_nodes(
    g: &mut Graph,
    seq: NodeId,
    cell: &CellNodes,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<NodeId>> {
    let t_len = g.value(seq).shape()[0];
    let mut h = g.constant(Tensor::zeros(vec![1, hidden]));
    let mut states = vec![0usize; t_len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in order {
        let x_t = g.row(seq, t)?;
        let zx = g.linear(x_t, cell.wz, cell.bz)?;
        let zh = g.matmul(h, cell.uz)?;
        let z_pre = g.add(zx, zh)?;
        let z = g.sigmoid(z_pre);
        let rx = g.linear(x_t, cell.wr, cell.br)?;
        let rh = g.matmul(h, cell.ur)?;
        let r_pre = g.add(rx, rh)?;
        let r = g.sigmoid(r_pre);
        let gated_h = g.mul(r, h)?;
        let cx = g.linear(x_t, cell.wh, cell.bh)?;
        let ch = g.matmul(gated_h, cell.uh)?;
        let cand_pre = g.add(cx, ch)?;
        let cand = g.tanh(cand_pre);
        let keep = g.one_minus(z);
        let kept = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        h = g.add(kept, new)?;
        states[t] = h;
    }
    Ok(states)
}

fn bigru_nodes(
    g: &mut Graph,
    seq: NodeId,
    fwd: &CellNodes,
    bwd: &CellNodes,
    hidden: usize,
) -> Result<NodeId> {
    let f_states = gru_direction_nodes(g, seq, fwd, hidden, false)?;
    let b_states = gru_direction_nodes(g, seq, bwd, hidden, true)?;
    let f_mat = g.stack_rows(&f_states)?;
    let b_mat = g.stack_rows(&b_states)?;
    Ok(g.concat_cols(f_mat, b_mat)?)
}

fn attention_pool_nodes(g: &mut Graph, o_prime: NodeId, z_loc: NodeId) -> Result<NodeId> {
    let num = g.sum_over_time(o_prime)?;
    let den = g.sum_over_time(z_loc)?;
    Ok(g.div(num, den)?)
}

fn check_finite(g: &Graph, id: NodeId, layer: &str) -> Result<()> {
    if g.value(id).is_finite() {
        Ok(())
    } else {
        Err(Error::Tensor(TensorError::InvalidValue {
            op: "forward",
            reason: format!("non-finite activation in {}", layer),
        }))
    }
}

/// Build the full forward pass inside `g`. `x` must be a [frames, bins, 1]
/// node (see `chunk_input`).
pub fn forward_graph(
    g: &mut Graph,
    nodes: &ParamNodes,
    x: NodeId,
    config: &ModelConfig,
    pooling: ClipPooling,
) -> Result<ForwardNodes> {
    let shape = g.value(x).shape();
    if shape != [config.frames, config.bins, 1] {
        return Err(Error::config(format!(
            "input shape {:?} does not match model ({}x{})",
            shape, config.frames, config.bins
        )));
    }
    let pool = config.mode.pool();
    let mut cur = x;
    for (i, blk) in nodes.blocks.iter().enumerate() {
        cur = glu_block_nodes(g, cur, blk, pool)?;
        check_finite(g, cur, &format!("conv block {}", i))?;
    }
    let seq = g.flatten_trailing(cur)?;
    let rnn = bigru_nodes(g, seq, &nodes.fwd, &nodes.bwd, config.hidden)?;
    check_finite(g, rnn, "bigru")?;

    let o_pre = g.linear(rnn, nodes.w_cls, nodes.b_cls)?;
    let o = g.sigmoid(o_pre);
    let z_pre = g.linear(rnn, nodes.w_loc, nodes.b_loc)?;
    let z_loc = g.softmax_rows(z_pre)?;
    check_finite(g, o, "sigmoid head")?;
    check_finite(g, z_loc, "softmax head")?;

    let o_prime = g.mul(o, z_loc)?;
    let clip = match pooling {
        ClipPooling::Attention => attention_pool_nodes(g, o_prime, z_loc)?,
        ClipPooling::Mean => g.mean_over_time(o)?,
    };
    Ok(ForwardNodes {
        o,
        z_loc,
        o_prime,
        clip,
    })
}

/// Reshape a [T, F] feature matrix into the [T, F, 1] single-channel image
/// the conv stack expects.
pub fn chunk_input(chunk: &FeatureChunk) -> Result<Tensor> {
    let (t, f) = (chunk.frames(), chunk.bins());
    Ok(chunk.values.clone().reshaped(vec![t, f, 1])?)
}

/// Run one clip through the model.
pub fn forward(
    chunk: &FeatureChunk,
    params: &ModelParams,
    pooling: ClipPooling,
) -> Result<FramePosteriors> {
    let x = chunk_input(chunk)?;
    let mut g = Graph::new();
    let nodes = params.register(&mut g);
    let x_id = g.constant(x);
    let out = forward_graph(&mut g, &nodes, x_id, &params.config, pooling)?;
    Ok(FramePosteriors {
        o: g.value(out.o).clone(),
        z_loc: g.value(out.z_loc).clone(),
        o_prime: g.value(out.o_prime).clone(),
        clip: g.value(out.clip).clone(),
    })
}

/// One GLU conv block as a standalone op: gate, multiply, pool.
pub fn glu_block_forward(
    x: &Tensor,
    block: &GatedConvBlock,
    pool: (usize, usize),
) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = BlockNodes {
        w: g.input(&block.w),
        b: g.input(&block.b),
        v: g.input(&block.v),
        c: g.input(&block.c),
    };
    let x_id = g.input(x);
    let out = glu_block_nodes(&mut g, x_id, &nodes, pool)?;
    Ok(g.value(out).clone())
}

/// Bidirectional GRU over a [T', D] sequence as a standalone op.
pub fn bigru_forward(x: &Tensor, fwd: &GruCell, bwd: &GruCell) -> Result<Tensor> {
    let hidden = fwd.bz.numel();
    let mut g = Graph::new();
    let reg = |cell: &GruCell, g: &mut Graph| CellNodes {
        wz: g.constant(cell.wz.clone()),
        uz: g.constant(cell.uz.clone()),
        bz: g.constant(cell.bz.clone()),
        wr: g.constant(cell.wr.clone()),
        ur: g.constant(cell.ur.clone()),
        br: g.constant(cell.br.clone()),
        wh: g.constant(cell.wh.clone()),
        uh: g.constant(cell.uh.clone()),
        bh: g.constant(cell.bh.clone()),
    };
    let f_nodes = reg(fwd, &mut g);
    let b_nodes = reg(bwd, &mut g);
    let x_id = g.constant(x.clone());
    let out = bigru_nodes(&mut g, x_id, &f_nodes, &b_nodes, hidden)?;
    Ok(g.value(out).clone())
}
