//! Parameter-matched standard-attention baseline.
//!
//! Same embeddings, block structure (u = LN1(h + mix), h' = u + FFN(LN2(u))),
//! loss and head as the pointer model; only the mixing step differs. Scoring
//! and aggregation go through the same dot/axpy kernels the pointer path
//! uses, so wall-clock comparisons isolate the O(N²) vs O(N·K) mechanism.

use crate::error::Result;
use crate::model::{embed_tokens, readout, BoundEmbeddings, EmbeddingStack};
use crate::nn::{
    self, Binding, BoundFfn, BoundLayerNorm, BoundLinear, FfnParams, LayerNormParams,
    LinearParams,
};
use crate::pointer::ModelConfig;
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One attention head's projections.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
}

#[derive(Debug, Clone)]
pub struct VanillaLayerParams {
    pub heads: Vec<HeadParams>,
    pub wo: LinearParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

impl VanillaLayerParams {
    pub fn init(d: usize, n_heads: usize, rng: &mut Stream) -> Self {
        let dh = d / n_heads;
        VanillaLayerParams {
            heads: (0..n_heads)
                .map(|_| HeadParams {
                    wq: LinearParams::init(d, dh, rng),
                    wk: LinearParams::init(d, dh, rng),
                    wv: LinearParams::init(d, dh, rng),
                })
                .collect(),
            wo: LinearParams::init(d, d, rng),
            ln1: LayerNormParams::init(d),
            ln2: LayerNormParams::init(d),
            ffn: FfnParams::init(d, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Binding, prefix: &str) -> BoundVanillaLayer {
        BoundVanillaLayer {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(h, head)| BoundHead {
                    wq: head.wq.bind(tape, reg, &format!("{prefix}.h{h}.wq")),
                    wk: head.wk.bind(tape, reg, &format!("{prefix}.h{h}.wk")),
                    wv: head.wv.bind(tape, reg, &format!("{prefix}.h{h}.wv")),
                })
                .collect(),
            wo: self.wo.bind(tape, reg, &format!("{prefix}.wo")),
            ln1: self.ln1.bind(tape, reg, &format!("{prefix}.ln1")),
            ln2: self.ln2.bind(tape, reg, &format!("{prefix}.ln2")),
            ffn: self.ffn.bind(tape, reg, &format!("{prefix}.ffn")),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        for (h, head) in self.heads.iter().enumerate() {
            head.wq.visit(&format!("{prefix}.h{h}.wq"), f);
            head.wk.visit(&format!("{prefix}.h{h}.wk"), f);
            head.wv.visit(&format!("{prefix}.h{h}.wv"), f);
        }
        self.wo.visit(&format!("{prefix}.wo"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        for (h, head) in self.heads.iter_mut().enumerate() {
            head.wq.visit_mut(&format!("{prefix}.h{h}.wq"), f);
            head.wk.visit_mut(&format!("{prefix}.h{h}.wk"), f);
            head.wv.visit_mut(&format!("{prefix}.h{h}.wv"), f);
        }
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

pub struct BoundHead {
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub wv: BoundLinear,
}

pub struct BoundVanillaLayer {
    pub heads: Vec<BoundHead>,
    pub wo: BoundLinear,
    pub ln1: BoundLayerNorm,
    pub ln2: BoundLayerNorm,
    pub ffn: BoundFfn,
}

/// Multi-head attention: per-head softmax(q kᵀ/√d_h + mask) v, heads
/// concatenated and projected.
pub fn mha_forward(
    tape: &mut Tape,
    layer: &BoundVanillaLayer,
    h: Var,
    causal: bool,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let q = nn::linear(tape, head.wq, h)?;
        let k = nn::linear(tape, head.wk, h)?;
        let v = nn::linear(tape, head.wv, h)?;
        outs.push(tape.attention_head(q, k, v, causal)?);
    }
    let cat = tape.concat(&outs)?;
    nn::linear(tape, layer.wo, cat)
}

/// One baseline block, mirroring the pointer layer's residual reading.
pub fn vanilla_layer_forward(
    tape: &mut Tape,
    layer: &BoundVanillaLayer,
    h: Var,
    causal: bool,
) -> Result<Var> {
    let z = mha_forward(tape, layer, h, causal)?;
    let res = tape.add(h, z)?;
    let u = nn::layer_norm(tape, layer.ln1, res)?;
    let normed = nn::layer_norm(tape, layer.ln2, u)?;
    let f = nn::ffn(tape, layer.ffn, normed)?;
    tape.add(u, f)
}

#[derive(Debug, Clone)]
pub struct VanillaModel {
    pub embed: EmbeddingStack,
    pub layers: Vec<VanillaLayerParams>,
}

impl VanillaModel {
    pub fn init(cfg: &ModelConfig, rng: &mut Stream) -> Self {
        VanillaModel {
            embed: EmbeddingStack::init(cfg, rng),
            layers: (0..cfg.n_layers)
                .map(|_| VanillaLayerParams::init(cfg.d_model, cfg.n_heads, rng))
                .collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Binding) -> BoundVanillaModel {
        BoundVanillaModel {
            embed: self.embed.bind(tape, reg),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(tape, reg, &format!("l{i}")))
                .collect(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        self.embed.visit(f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("l{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.embed.visit_mut(f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("l{i}"), f);
        }
    }
}

pub struct BoundVanillaModel {
    pub embed: BoundEmbeddings,
    pub layers: Vec<BoundVanillaLayer>,
}

/// Embedding -> L attention blocks -> final norm -> vocab head.
pub fn vanilla_model_forward(
    tape: &mut Tape,
    model: &BoundVanillaModel,
    tokens: &[u32],
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut h = embed_tokens(tape, &model.embed, tokens, cfg)?;
    for layer in &model.layers {
        h = vanilla_layer_forward(tape, layer, h, cfg.causal)?;
    }
    readout(tape, &model.embed, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_diff_check;
    use crate::model::{Model, ModelKind};
    use crate::tasks::VocabSpec;

    fn cfg(d: usize, heads: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            d_model: d,
            n_heads: heads,
            vocab_size: VocabSpec::new(8).unwrap().total(),
            max_seq_len: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_qk_gives_uniform_attention_means() {
        let d = 8;
        let n = 5;
        let c = cfg(d, 2, 1);
        let mut model = match Model::init(ModelKind::Vanilla, &c, 13).unwrap() {
            Model::Vanilla(m) => m,
            _ => unreachable!(),
        };
        for head in model.layers[0].heads.iter_mut() {
            head.wq.weight = Tensor::zeros(&[d, d / 2]);
            head.wq.bias = Tensor::zeros(&[d / 2]);
            head.wk.weight = Tensor::zeros(&[d, d / 2]);
            head.wk.bias = Tensor::zeros(&[d / 2]);
        }
        // identity output projection exposes the per-head mixture directly
        model.layers[0].wo.weight = Tensor::eye(d);
        model.layers[0].wo.bias = Tensor::zeros(&[d]);
        let layer = &model.layers[0];

        let mut tape = Tape::new();
        let mut reg = Binding::new();
        let bound = layer.bind(&mut tape, &mut reg, "l");
        let mut rng = Stream::new(14);
        let h = tape.constant(Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.uniform_sym(1.0)).collect(),
        ).unwrap());
        for &causal in &[false, true] {
            let out = mha_forward(&mut tape, &bound, h, causal).unwrap();
            for (hidx, head) in layer.heads.iter().enumerate() {
                // v = h · wv + bias, computed by hand
                let dh = d / 2;
                let mut v = vec![0.0f32; n * dh];
                for r in 0..n {
                    for cdx in 0..dh {
                        let mut acc = head.wv.bias.data()[cdx];
                        for k in 0..d {
                            acc += tape.value(h).row(r)[k] * head.wv.weight.data()[k * dh + cdx];
                        }
                        v[r * dh + cdx] = acc;
                    }
                }
                for i in 0..n {
                    let allowed = if causal { i + 1 } else { n };
                    for cdx in 0..dh {
                        let mean: f32 = (0..allowed).map(|j| v[j * dh + cdx]).sum::<f32>()
                            / allowed as f32;
                        let got = tape.value(out).row(i)[hidx * dh + cdx];
                        assert!(
                            (got - mean).abs() < 1e-5,
                            "causal={causal} head {hidx} row {i}: {got} vs {mean}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn attention_weight_gradients_match_fd() {
        let d = 4;
        let n = 3;
        let mut rng = Stream::new(15);
        let w0 = Tensor::new(vec![d, d], (0..d * d).map(|_| rng.uniform_sym(0.7)).collect()).unwrap();
        let h_data: Vec<f32> = (0..n * d).map(|_| rng.uniform_sym(1.0)).collect();
        let kw: Vec<f32> = (0..d * d).map(|_| rng.uniform_sym(0.7)).collect();
        let vw: Vec<f32> = (0..d * d).map(|_| rng.uniform_sym(0.7)).collect();
        let err = finite_diff_check(
            |tape, wq| {
                let h = tape.constant(Tensor::new(vec![n, d], h_data.clone())?);
                let wk = tape.constant(Tensor::new(vec![d, d], kw.clone())?);
                let wv = tape.constant(Tensor::new(vec![d, d], vw.clone())?);
                let q = tape.matmul(h, wq)?;
                let k = tape.matmul(h, wk)?;
                let v = tape.matmul(h, wv)?;
                let out = tape.attention_head(q, k, v, true)?;
                let sq = tape.mul(out, out)?;
                tape.sum(sq)
            },
            &w0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "got {err}");
    }

    #[test]
    fn attention_value_gradient_matches_fd() {
        let d = 4;
        let n = 4;
        let mut rng = Stream::new(16);
        let v0 = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.uniform_sym(1.0)).collect()).unwrap();
        let qd: Vec<f32> = (0..n * d).map(|_| rng.uniform_sym(1.0)).collect();
        let kd: Vec<f32> = (0..n * d).map(|_| rng.uniform_sym(1.0)).collect();
        let err = finite_diff_check(
            |tape, v| {
                let q = tape.constant(Tensor::new(vec![n, d], qd.clone())?);
                let k = tape.constant(Tensor::new(vec![n, d], kd.clone())?);
                let out = tape.attention_head(q, k, v, false)?;
                let sq = tape.mul(out, out)?;
                tape.sum(sq)
            },
            &v0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "got {err}");
    }

    #[test]
    fn logits_shape_and_determinism() {
        let c = cfg(16, 4, 2);
        let model = Model::init(ModelKind::Vanilla, &c, 17).unwrap();
        let tokens = [1u32, 3, 0, 7, 7, 2];
        let run = || {
            let mut tape = Tape::new();
            let (logits, _, _) = model.forward(&mut tape, &tokens, &c, crate::pointer::Phase::Infer).unwrap();
            tape.value(logits).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[6, c.vocab_size]);
        let b = run();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn parameter_count_matches_pointer_within_15_percent() {
        // the published comparison point: default width/depth, ~3.2M params
        let c = ModelConfig {
            vocab_size: 21,
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        let pointer = Model::init(ModelKind::Pointer, &c, 1).unwrap();
        let vanilla = Model::init(ModelKind::Vanilla, &c, 1).unwrap();
        let p = pointer.param_count() as f64;
        let v = vanilla.param_count() as f64;
        assert!(p > 3.2e6 && v > 3.2e6, "models too small: {p} vs {v}");
        let ratio = v / p;
        assert!(
            (0.85..=1.15).contains(&ratio),
            "param ratio {ratio}: {v} vs {p}"
        );
    }
}
