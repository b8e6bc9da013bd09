use std::f64::consts::PI;

use super::params::{Bound, Initializer};
use super::ModelConfig;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const SINE_TEMPERATURE: f64 = 10000.0;

pub(super) fn init(init: &mut Initializer, config: &ModelConfig) -> Result<()> {
    let c = config.query_dim;
    let last = *config.backbone_channels.last().expect("validated");
    init.conv("decoder.input_proj", c, last, 1)?;
    init.constant("query.content", &[config.num_queries, c], 0.0)?;
    init.uniform("query.pos", &[config.num_queries, c], 3f64.sqrt())?;
    for l in 0..config.decoder_layers {
        if config.use_self_attention {
            attention_init(init, &format!("decoder.{l}.self_attn"), c)?;
            init.norm(&format!("decoder.{l}.norm1"), c)?;
        }
        attention_init(init, &format!("decoder.{l}.cross_attn"), c)?;
        init.norm(&format!("decoder.{l}.norm2"), c)?;
        init.linear(&format!("decoder.{l}.ffn.0"), c, config.ffn_dim())?;
        init.linear(&format!("decoder.{l}.ffn.1"), config.ffn_dim(), c)?;
        init.norm(&format!("decoder.{l}.norm3"), c)?;
    }
    init.norm("decoder.final_norm", c)
}

fn attention_init(init: &mut Initializer, prefix: &str, c: usize) -> Result<()> {
    for proj in ["q", "k", "v", "out"] {
        init.linear(&format!("{prefix}.{proj}"), c, c)?;
    }
    Ok(())
}

fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

/// Layer norm over the channel axis of token-major `[n, C]` input.
pub(super) fn token_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, 1)?;
    let n = g.bias_mul(n, p.var(&format!("{prefix}.gain"))?, 1)?;
    g.bias_add(n, p.var(&format!("{prefix}.bias"))?, 1)
}

/// Multi-head scaled dot-product attention over token-major inputs.
fn attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    heads: usize,
    query: Var,
    key: Var,
    value: Var,
) -> Result<Var> {
    let q = linear(g, p, &format!("{prefix}.q"), query)?;
    let k = linear(g, p, &format!("{prefix}.k"), key)?;
    let v = linear(g, p, &format!("{prefix}.v"), value)?;
    let c = g.shape(q)[1];
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.narrow(q, 1, h * d, d)?, g.narrow(k, 1, h * d, d)?, g.narrow(v, 1, h * d, d)?)
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores, 1)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, p, &format!("{prefix}.out"), merged)
}

/// Fixed 2-D sine/cosine encoding of an `h × w` grid as `[h·w, channels]`.
///
/// The first half of the channels encodes the row, the second half the
/// column; coordinates are normalized to `(0, 2π]`.
pub fn sine_position_encoding(h: usize, w: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let mut data = vec![0.0; h * w * channels];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * channels..(y * w + x + 1) * channels];
            for (axis, coord) in [((y + 1) as f64 / h as f64), ((x + 1) as f64 / w as f64)]
                .into_iter()
                .enumerate()
            {
                let pos = coord * 2.0 * PI;
                for i in 0..half {
                    let freq = SINE_TEMPERATURE.powf((2 * (i / 2)) as f64 / half as f64);
                    let arg = pos / freq;
                    row[axis * half + i] = if i % 2 == 0 { arg.sin() } else { arg.cos() };
                }
            }
        }
    }
    Tensor::new(vec![h * w, channels], data).expect("consistent shape")
}

/// Transformer decoder over `N` learnable queries attending to `F`.
///
/// Post-norm layers: optional self-attention, cross-attention to the
/// projected feature map (keys carry sine position encodings), then a
/// two-layer feed-forward block; every sublayer has a residual connection
/// and layer norm. Returns the per-segment embeddings `[N, C_Q]` after each
/// layer, each passed through a shared final norm.
pub fn transformer_decoder_forward(g: &mut Graph, p: &Bound, config: &ModelConfig, low_res: Var) -> Result<Vec<Var>> {
    let c = config.query_dim;
    let (fh, fw) = {
        let s = g.shape(low_res);
        (s[1], s[2])
    };
    let proj = g.conv1x1(low_res, p.var("decoder.input_proj.weight")?)?;
    let proj = g.bias_add(proj, p.var("decoder.input_proj.bias")?, 0)?;
    let flat = g.reshape(proj, vec![c, fh * fw])?;
    let memory = g.transpose(flat)?;
    let pos = g.constant(sine_position_encoding(fh, fw, c));
    let keys = g.add(memory, pos)?;

    let query_pos = p.var("query.pos")?;
    let mut tgt = p.var("query.content")?;
    let mut outputs = Vec::with_capacity(config.decoder_layers);
    for l in 0..config.decoder_layers {
        if config.use_self_attention {
            let qk = g.add(tgt, query_pos)?;
            let attended = attention(g, p, &format!("decoder.{l}.self_attn"), config.heads, qk, qk, tgt)?;
            let res = g.add(tgt, attended)?;
            tgt = token_norm(g, p, &format!("decoder.{l}.norm1"), res)?;
        }
        let q = g.add(tgt, query_pos)?;
        let attended = attention(g, p, &format!("decoder.{l}.cross_attn"), config.heads, q, keys, memory)?;
        let res = g.add(tgt, attended)?;
        tgt = token_norm(g, p, &format!("decoder.{l}.norm2"), res)?;

        let hidden = linear(g, p, &format!("decoder.{l}.ffn.0"), tgt)?;
        let hidden = g.relu(hidden)?;
        let ff = linear(g, p, &format!("decoder.{l}.ffn.1"), hidden)?;
        let res = g.add(tgt, ff)?;
        tgt = token_norm(g, p, &format!("decoder.{l}.norm3"), res)?;

        outputs.push(token_norm(g, p, "decoder.final_norm", tgt)?);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Params};

    fn config(layers: usize, self_attn: bool) -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            num_queries: 5,
            decoder_layers: layers,
            heads: 2,
            query_dim: 8,
            mask_dim: 8,
            backbone_channels: vec![4, 8, 8],
            image_size: (16, 16),
            use_self_attention: self_attn,
            ..ModelConfig::default()
        }
    }

    fn run(params: &Params, c: &ModelConfig, f: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(f.clone());
        let out = transformer_decoder_forward(&mut g, &p, c, x).unwrap();
        out.into_iter().map(|v| g.value(v).clone()).collect()
    }

    #[test]
    fn one_output_per_layer() {
        let c = ModelConfig { num_classes: 150, ..ModelConfig::default() };
        let params = init_params(&c, 0).unwrap();
        let f = Tensor::from_fn(vec![64, 4, 4], |i| (i as f64 * 0.13).cos());
        let out = run(&params, &c, &f);
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|q| q.shape() == [100, 64]));
    }

    #[test]
    fn sine_encoding_is_bounded_and_distinct() {
        let pe = sine_position_encoding(4, 4, 8);
        assert_eq!(pe.shape(), &[16, 8]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe.data()[..8], pe.data()[8..16]);
    }

    /// Hand trace of one post-norm layer for zero queries and a zero feature
    /// map: every value projection collapses to its bias, so every attention
    /// output is `b_v · W_out + b_out` whatever the attention weights are.
    #[test]
    fn zero_inputs_propagate_biases_identically_to_every_query() {
        let c = config(1, true);
        let mut params = init_params(&c, 9).unwrap();
        // give every bias a distinct non-zero value so the trace is non-trivial
        let names: Vec<String> = params.names().filter(|n| n.ends_with(".bias")).map(str::to_string).collect();
        for (k, name) in names.iter().enumerate() {
            let t = params.get_mut(name).unwrap();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((k * 31 + i * 7) % 13) as f64 / 13.0 - 0.5;
            }
        }
        let f = Tensor::zeros(vec![8, 2, 2]);
        let out = run(&params, &c, &f);
        let q = &out[0];

        let vecmat = |x: &[f64], name: &str| -> Vec<f64> {
            let w = params.get(&format!("{name}.weight")).unwrap();
            let b = params.get(&format!("{name}.bias")).unwrap();
            let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
            (0..n_out)
                .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>())
                .collect()
        };
        let norm = |x: &[f64], name: &str| -> Vec<f64> {
            let gain = params.get(&format!("{name}.gain")).unwrap().data();
            let bias = params.get(&format!("{name}.bias")).unwrap().data();
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
            let r = 1.0 / (var + crate::graph::LAYER_NORM_EPS).sqrt();
            x.iter().enumerate().map(|(i, v)| (v - mean) * r * gain[i] + bias[i]).collect()
        };
        let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };

        let zero = vec![0.0; 8];
        // memory = input_proj(0) = its bias; values = memory · W_v + b_v
        let memory = params.get("decoder.input_proj.bias").unwrap().data().to_vec();
        let sa = vecmat(&vecmat(&zero, "decoder.0.self_attn.v"), "decoder.0.self_attn.out");
        let t1 = norm(&add(&zero, &sa), "decoder.0.norm1");
        let ca = vecmat(&vecmat(&memory, "decoder.0.cross_attn.v"), "decoder.0.cross_attn.out");
        let t2 = norm(&add(&t1, &ca), "decoder.0.norm2");
        let hidden: Vec<f64> = vecmat(&t2, "decoder.0.ffn.0").into_iter().map(|v| v.max(0.0)).collect();
        let t3 = norm(&add(&t2, &vecmat(&hidden, "decoder.0.ffn.1")), "decoder.0.norm3");
        let expect = norm(&t3, "decoder.final_norm");

        for row in q.data().chunks(8) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn without_self_attention_queries_do_not_interact() {
        let c = config(3, false);
        let mut params = init_params(&c, 4).unwrap();
        let f = Tensor::from_fn(vec![8, 2, 2], |i| (i as f64 * 0.7).sin());
        let before = run(&params, &c, &f);
        // changing query 0's positional encoding must leave queries 1.. untouched
        params.get_mut("query.pos").unwrap().data_mut()[..8].iter_mut().for_each(|v| *v += 0.5);
        let after = run(&params, &c, &f);
        let last = before.len() - 1;
        assert_ne!(before[last].data()[..8], after[last].data()[..8]);
        assert_eq!(before[last].data()[8..], after[last].data()[8..]);
    }
}
