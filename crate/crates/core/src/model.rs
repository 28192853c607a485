//! The cross-environment transformer estimator (CRETE).
//!
//! Each context measurement becomes one token: its canonical feature row is
//! embedded by a learnable affine map, passed through pre-norm residual blocks
//! of (optionally causal) multi-head self-attention and a GELU MLP, and read
//! out by a per-token affine head. With causal attention, token `m` only sees
//! measurements `1..=m`, so output `m` is the estimate given the first `m`
//! measurements.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{Episode, Measurement, MeasurementSet};
use crate::error::{invalid, Error, Result};
use crate::geometry::Point3;
use crate::invariance::{canonicalize, FeatureMatrix, GainScaler, QueryInput, NUM_FEATURES};

/// How transformer outputs are reduced to gain estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// Affine readout of every token; token `m` estimates from the first `m`.
    PerToken,
    /// Affine readout of the running mean of token outputs.
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub causal: bool,
    pub head: OutputHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { num_blocks: 4, num_heads: 2, embed_dim: 64, mlp_ratio: 4, causal: true, head: OutputHead::PerToken }
    }
}

impl ModelConfig {
    /// 12 blocks, 2 heads, 128-dimensional embeddings (about 2M parameters).
    pub fn full_scale() -> Self {
        ModelConfig { num_blocks: 12, num_heads: 2, embed_dim: 128, mlp_ratio: 3, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.num_heads == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(invalid(format!("embed_dim {} is not divisible by num_heads {}", self.embed_dim, self.num_heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone)]
struct HeadIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    heads: Vec<HeadIdx>,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Positions of every named tensor in [`ModelParams::tensors`].
#[derive(Debug, Clone)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    shapes: Vec<(String, usize, usize)>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut shapes = Vec::new();
        let mut add = |name: String, r: usize, cols: usize| {
            shapes.push((name, r, cols));
            shapes.len() - 1
        };
        let (d, dh, h) = (c.embed_dim, c.head_dim(), c.hidden_dim());
        let embed_w = add("embed.w".into(), NUM_FEATURES, d);
        let embed_b = add("embed.b".into(), 1, d);
        let mut blocks = Vec::with_capacity(c.num_blocks);
        for b in 0..c.num_blocks {
            let ln1_g = add(format!("block{b}.ln1.g"), 1, d);
            let ln1_b = add(format!("block{b}.ln1.b"), 1, d);
            let heads = (0..c.num_heads)
                .map(|k| HeadIdx {
                    wq: add(format!("block{b}.head{k}.wq"), d, dh),
                    bq: add(format!("block{b}.head{k}.bq"), 1, dh),
                    wk: add(format!("block{b}.head{k}.wk"), d, dh),
                    bk: add(format!("block{b}.head{k}.bk"), 1, dh),
                    wv: add(format!("block{b}.head{k}.wv"), d, dh),
                    bv: add(format!("block{b}.head{k}.bv"), 1, dh),
                    wo: add(format!("block{b}.head{k}.wo"), dh, d),
                })
                .collect();
            let bo = add(format!("block{b}.attn.bo"), 1, d);
            let ln2_g = add(format!("block{b}.ln2.g"), 1, d);
            let ln2_b = add(format!("block{b}.ln2.b"), 1, d);
            let w1 = add(format!("block{b}.mlp.w1"), d, h);
            let b1 = add(format!("block{b}.mlp.b1"), 1, h);
            let w2 = add(format!("block{b}.mlp.w2"), h, d);
            let b2 = add(format!("block{b}.mlp.b2"), 1, d);
            blocks.push(BlockIdx { ln1_g, ln1_b, heads, bo, ln2_g, ln2_b, w1, b1, w2, b2 });
        }
        let lnf_g = add("final.ln.g".into(), 1, d);
        let lnf_b = add("final.ln.b".into(), 1, d);
        let head_w = add("head.w".into(), d, 1);
        let head_b = add("head.b".into(), 1, 1);
        Layout { embed_w, embed_b, blocks, lnf_g, lnf_b, head_w, head_b, shapes }
    }
}

/// Number of learnable scalars for a configuration.
pub fn parameter_count(config: &ModelConfig) -> usize {
    Layout::new(config).shapes.iter().map(|(_, r, c)| r * c).sum()
}

/// Default length used to bring coordinates in meters to order one.
pub const DEFAULT_LENGTH_SCALE: f64 = 100.0;

/// Learnable tensors plus the fixed normalization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub scaler: GainScaler,
    /// Coordinates and magnitudes are divided by this before embedding.
    pub length_scale: f64,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Gaussian initialization with fan-in scaling; residual output
    /// projections are further shrunk by `1/sqrt(2 * num_blocks)`. Biases
    /// start at zero and layer-norm gains at one.
    pub fn init(config: ModelConfig, scaler: GainScaler, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * config.num_blocks as f64).sqrt();
        let mut names = Vec::with_capacity(layout.shapes.len());
        let mut tensors = Vec::with_capacity(layout.shapes.len());
        for (name, r, c) in &layout.shapes {
            let t = if name.ends_with(".g") {
                Tensor::filled(*r, *c, 1.0)
            } else if *r == 1 {
                Tensor::zeros(*r, *c)
            } else {
                let mut std = 1.0 / (*r as f64).sqrt();
                if name.ends_with(".wo") || name.ends_with(".w2") {
                    std *= residual_scale;
                }
                let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
                Tensor { rows: *r, cols: *c, data: (0..r * c).map(|_| normal.sample(&mut rng)).collect() }
            };
            names.push(name.clone());
            tensors.push(t);
        }
        Ok(ModelParams { config, scaler, length_scale: DEFAULT_LENGTH_SCALE, names, tensors })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in &t.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Pushes every parameter tensor onto `tape` as a leaf.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Feature rows divided into embedding inputs: length-valued columns are
/// rescaled by `length_scale`, unit vectors and the gain are left as is.
pub fn embedding_input(features: &FeatureMatrix, length_scale: f64) -> Tensor {
    const LENGTH_COLUMNS: [usize; 13] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 21];
    let mut data = features.data.clone();
    let inv = 1.0 / length_scale;
    for row in data.chunks_exact_mut(NUM_FEATURES) {
        for &c in &LENGTH_COLUMNS {
            row[c] *= inv;
        }
    }
    Tensor { rows: features.rows, cols: NUM_FEATURES, data }
}

/// Affine token embedding, `M x embed_dim`.
pub fn embed(tape: &mut Tape, params: &ModelParams, vars: &[Var], input: Var) -> Result<Var> {
    let l = params.layout();
    let x = tape.matmul(input, vars[l.embed_w])?;
    tape.add_row(x, vars[l.embed_b])
}

fn affine_norm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.layer_norm(x);
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

/// Residual blocks followed by the final layer norm, `M x embed_dim`.
pub fn transformer_forward(tape: &mut Tape, params: &ModelParams, vars: &[Var], tokens: Var) -> Result<Var> {
    let c = &params.config;
    let l = params.layout();
    let inv_sqrt_dh = 1.0 / (c.head_dim() as f64).sqrt();
    let mut x = tokens;
    for (bi, b) in l.blocks.iter().enumerate() {
        let h = affine_norm(tape, x, vars[b.ln1_g], vars[b.ln1_b])?;
        let mut attn: Option<Var> = None;
        for hd in &b.heads {
            let q = tape.matmul(h, vars[hd.wq])?;
            let q = tape.add_row(q, vars[hd.bq])?;
            let k = tape.matmul(h, vars[hd.wk])?;
            let k = tape.add_row(k, vars[hd.bk])?;
            let v = tape.matmul(h, vars[hd.wv])?;
            let v = tape.add_row(v, vars[hd.bv])?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, inv_sqrt_dh);
            let a = tape.softmax(s, c.causal)?;
            let o = tape.matmul(a, v)?;
            let o = tape.matmul(o, vars[hd.wo])?;
            attn = Some(match attn {
                Some(acc) => tape.add(acc, o)?,
                None => o,
            });
        }
        let attn = tape.add_row(attn.expect("at least one head"), vars[b.bo])?;
        x = tape.add(x, attn)?;
        let h = affine_norm(tape, x, vars[b.ln2_g], vars[b.ln2_b])?;
        let m = tape.matmul(h, vars[b.w1])?;
        let m = tape.add_row(m, vars[b.b1])?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, vars[b.w2])?;
        let m = tape.add_row(m, vars[b.b2])?;
        x = tape.add(x, m)?;
        if !tape.value(x).all_finite() {
            return Err(Error::NonFiniteActivation { block: bi });
        }
    }
    affine_norm(tape, x, vars[l.lnf_g], vars[l.lnf_b])
}

/// Standardized per-prefix predictions, `M x 1`.
pub fn readout(tape: &mut Tape, params: &ModelParams, vars: &[Var], hidden: Var) -> Result<Var> {
    let l = params.layout();
    let hidden = match params.config.head {
        OutputHead::PerToken => hidden,
        OutputHead::Average => {
            let m = tape.value(hidden).rows;
            let mut avg = Tensor::zeros(m, m);
            for i in 0..m {
                for j in 0..=i {
                    avg.data[i * m + j] = 1.0 / (i + 1) as f64;
                }
            }
            let avg = tape.leaf(avg);
            tape.matmul(avg, hidden)?
        }
    };
    let y = tape.matmul(hidden, vars[l.head_w])?;
    tape.add_row(y, vars[l.head_b])
}

/// Full network on one feature matrix: standardized predictions `M x 1`.
pub fn forward(tape: &mut Tape, params: &ModelParams, vars: &[Var], features: &FeatureMatrix) -> Result<Var> {
    if features.rows == 0 {
        return Err(invalid("feature matrix has no rows"));
    }
    let input = tape.leaf(embedding_input(features, params.length_scale));
    let tokens = embed(tape, params, vars, input)?;
    let hidden = transformer_forward(tape, params, vars, tokens)?;
    readout(tape, params, vars, hidden)
}

/// Gain estimates in dB for every context prefix; entry `m - 1` uses the first
/// `m` context measurements.
pub fn predict_prefixes(query: QueryInput<'_>, params: &ModelParams) -> Result<Vec<f64>> {
    let features = canonicalize(query, &params.scaler)?;
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let out = forward(&mut tape, params, &vars, &features)?;
    Ok(tape.value(out).data.iter().map(|&z| params.scaler.destandardize(z)).collect())
}

/// Gain estimate in dB given the whole context.
pub fn estimate(query: QueryInput<'_>, params: &ModelParams) -> Result<f64> {
    Ok(*predict_prefixes(query, params)?.last().expect("nonempty context"))
}

fn target_loss_on_tape(tape: &mut Tape, params: &ModelParams, vars: &[Var], context: &MeasurementSet, target: &Measurement) -> Result<Var> {
    let features = canonicalize(QueryInput::new(target.tx, target.rx, context), &params.scaler)?;
    let preds = forward(tape, params, vars, &features)?;
    let z = params.scaler.standardize(target.gain);
    let goal = tape.leaf(Tensor::filled(features.rows, 1, z));
    let diff = tape.sub(preds, goal)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

fn check_episode(episode: &Episode) -> Result<()> {
    if episode.context.is_empty() || episode.targets.is_empty() {
        return Err(invalid("episode needs a nonempty context and target set"));
    }
    Ok(())
}

/// Mean over targets and context prefixes of the squared standardized error,
/// built on a single tape.
pub fn episode_loss_on_tape(tape: &mut Tape, params: &ModelParams, vars: &[Var], episode: &Episode) -> Result<Var> {
    check_episode(episode)?;
    let mut total: Option<Var> = None;
    for t in &episode.targets.measurements {
        let l = target_loss_on_tape(tape, params, vars, &episode.context, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let norm = 1.0 / (episode.targets.len() * episode.context.len()) as f64;
    Ok(tape.scale(total.expect("nonempty targets"), norm))
}

pub fn episode_loss(params: &ModelParams, episode: &Episode) -> Result<f64> {
    check_episode(episode)?;
    let mut total = 0.0;
    for t in &episode.targets.measurements {
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let l = target_loss_on_tape(&mut tape, params, &vars, &episode.context, t)?;
        total += tape.value(l).data[0];
    }
    Ok(total / (episode.targets.len() * episode.context.len()) as f64)
}

/// Loss and parameter gradients, one tape per target.
pub fn episode_loss_and_grad(params: &ModelParams, episode: &Episode) -> Result<(f64, Vec<Tensor>)> {
    check_episode(episode)?;
    let norm = 1.0 / (episode.targets.len() * episode.context.len()) as f64;
    let mut grads: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    let mut total = 0.0;
    for t in &episode.targets.measurements {
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let l = target_loss_on_tape(&mut tape, params, &vars, &episode.context, t)?;
        total += tape.value(l).data[0];
        let mut g = tape.backward(l, Tensor::scalar(norm))?;
        for (acc, v) in grads.iter_mut().zip(&vars) {
            if let Some(gv) = g.take(*v) {
                acc.add_assign(&gv);
            }
        }
    }
    Ok((total * norm, grads))
}

const CHECKPOINT_MAGIC: &str = "crete-checkpoint 1";

fn ckpt_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

/// Writes a checkpoint: a text header (configuration, normalization
/// constants, tensor directory) terminated by `end`, then every tensor as
/// little-endian f64 in directory order.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    let c = &params.config;
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(w, "num_blocks {}", c.num_blocks)?;
    writeln!(w, "num_heads {}", c.num_heads)?;
    writeln!(w, "embed_dim {}", c.embed_dim)?;
    writeln!(w, "mlp_ratio {}", c.mlp_ratio)?;
    writeln!(w, "causal {}", c.causal)?;
    let head = match c.head {
        OutputHead::PerToken => "per_token",
        OutputHead::Average => "average",
    };
    writeln!(w, "head {head}")?;
    writeln!(w, "gain_mean {}", params.scaler.mean)?;
    writeln!(w, "gain_std {}", params.scaler.std)?;
    writeln!(w, "length_scale {}", params.length_scale)?;
    writeln!(w, "tensors {}", params.tensors.len())?;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        writeln!(w, "{name} {} {}", t.rows, t.cols)?;
    }
    writeln!(w, "end")?;
    for t in &params.tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn ckpt_field<R: BufRead, T: std::str::FromStr>(r: &mut R, key: &str) -> Result<T> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(ckpt_err(format!("expected `{key}`, found {:?}", line.trim_end())));
    }
    parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| ckpt_err(format!("bad value for `{key}`")))
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<ModelParams> {
    let mut magic = String::new();
    r.read_line(&mut magic)?;
    if magic.trim_end() != CHECKPOINT_MAGIC {
        return Err(ckpt_err(format!("bad magic line {:?}", magic.trim_end())));
    }
    let num_blocks = ckpt_field(&mut r, "num_blocks")?;
    let num_heads = ckpt_field(&mut r, "num_heads")?;
    let embed_dim = ckpt_field(&mut r, "embed_dim")?;
    let mlp_ratio = ckpt_field(&mut r, "mlp_ratio")?;
    let causal = ckpt_field(&mut r, "causal")?;
    let head = match ckpt_field::<_, String>(&mut r, "head")?.as_str() {
        "per_token" => OutputHead::PerToken,
        "average" => OutputHead::Average,
        other => return Err(ckpt_err(format!("unknown head `{other}`"))),
    };
    let config = ModelConfig { num_blocks, num_heads, embed_dim, mlp_ratio, causal, head };
    config.validate()?;
    let scaler = GainScaler { mean: ckpt_field(&mut r, "gain_mean")?, std: ckpt_field(&mut r, "gain_std")? };
    let length_scale: f64 = ckpt_field(&mut r, "length_scale")?;
    let count: usize = ckpt_field(&mut r, "tensors")?;
    let layout = Layout::new(&config);
    if count != layout.shapes.len() {
        return Err(ckpt_err(format!("{count} tensors, configuration needs {}", layout.shapes.len())));
    }
    let mut names = Vec::with_capacity(count);
    for (name, rows, cols) in &layout.shapes {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let expected = [name.as_str(), &rows.to_string(), &cols.to_string()];
        if parts != expected {
            return Err(ckpt_err(format!("tensor entry {:?}, expected {expected:?}", line.trim_end())));
        }
        names.push(name.clone());
    }
    let mut end = String::new();
    r.read_line(&mut end)?;
    if end.trim_end() != "end" {
        return Err(ckpt_err("missing `end` after tensor directory"));
    }
    let mut tensors = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for (_, rows, cols) in &layout.shapes {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf).map_err(|_| ckpt_err("truncated tensor data"))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor { rows: *rows, cols: *cols, data });
    }
    Ok(ModelParams { config, scaler, length_scale, names, tensors })
}

/// Convenience for estimating between two points given a context set.
pub fn estimate_pair(params: &ModelParams, tx: Point3, rx: Point3, context: &MeasurementSet) -> Result<f64> {
    estimate(QueryInput::new(tx, rx, context), params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_is_about_two_million() {
        let n = parameter_count(&ModelConfig::full_scale());
        assert!((n as f64 - 2e6).abs() / 2e6 < 0.15, "{n}");
    }

    #[test]
    fn embed_dim_must_divide_heads() {
        let c = ModelConfig { embed_dim: 63, ..Default::default() };
        assert!(ModelParams::init(c, GainScaler::identity(), 0).is_err());
    }

    #[test]
    fn zero_column_embeds_to_bias() {
        let params = ModelParams::init(ModelConfig::default(), GainScaler::identity(), 1).unwrap();
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let input = tape.leaf(Tensor::zeros(3, NUM_FEATURES));
        let tok = embed(&mut tape, &params, &vars, input).unwrap();
        let v = tape.value(tok);
        assert_eq!(v.shape(), [3, 64]);
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let params =
            ModelParams::init(ModelConfig { num_blocks: 2, embed_dim: 8, ..Default::default() }, GainScaler { mean: -80.5, std: 12.25 }, 3)
                .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, params);
        buf.truncate(buf.len() - 1);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
