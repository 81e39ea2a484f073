//! Edge convolution, the attention block and the correction walk, built on
//! the autodiff tape.

use rand::Rng;

use super::config::{ModelConfig, NormMode};
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::matching::knn_features;

fn uniform<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<()> {
    s.insert_uniform(name, shape, fan_in, rng)
}

fn norm_params(s: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    s.insert(&format!("{prefix}.scale"), Tensor::full(&[1, width], 1.0))?;
    s.insert(&format!("{prefix}.shift"), Tensor::zeros(&[1, width]))
}

fn scale_only(s: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    s.insert(&format!("{prefix}.scale"), Tensor::full(&[1, width], 1.0))
}

fn attention_params<R: Rng + ?Sized>(s: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let (c, dh) = (cfg.embed_dim, cfg.head_dim());
    for h in 0..cfg.heads {
        for p in ["q", "k", "v"] {
            uniform(s, &format!("{prefix}.head{h}.{p}"), &[c, dh], c, rng)?;
        }
    }
    uniform(s, &format!("{prefix}.out.weight"), &[c, c], c, rng)?;
    uniform(s, &format!("{prefix}.out.bias"), &[1, c], c, rng)
}

fn ff_params<R: Rng + ?Sized>(s: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
    for fc in ["fc1", "fc2"] {
        uniform(s, &format!("{prefix}.{fc}.weight"), &[c, c], c, rng)?;
        uniform(s, &format!("{prefix}.{fc}.bias"), &[1, c], c, rng)?;
    }
    Ok(())
}

/// Draws every parameter of the model. The final correction-walk layer is
/// zero, so an untrained walk returns zero offsets.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let mut d_in = 3;
    for (l, &w) in cfg.filters.iter().enumerate() {
        uniform(&mut s, &format!("dgcnn.layer{l}.weight"), &[2 * d_in, w], 2 * d_in, rng)?;
        // An inner shift survives the neighborhood max as a per-channel
        // constant, which the next layer's normalization removes again.
        if l + 1 == cfg.filters.len() {
            norm_params(&mut s, &format!("dgcnn.layer{l}.norm"), w)?;
        } else {
            scale_only(&mut s, &format!("dgcnn.layer{l}.norm"), w)?;
        }
        d_in = w;
    }
    let c = cfg.embed_dim;
    for l in 0..cfg.encoder_layers {
        let p = format!("transformer.enc{l}");
        norm_params(&mut s, &format!("{p}.norm1"), c)?;
        attention_params(&mut s, &format!("{p}.self_attn"), cfg, rng)?;
        norm_params(&mut s, &format!("{p}.norm2"), c)?;
        ff_params(&mut s, &format!("{p}.ff"), c, rng)?;
    }
    for l in 0..cfg.decoder_layers {
        let p = format!("transformer.dec{l}");
        norm_params(&mut s, &format!("{p}.norm1"), c)?;
        attention_params(&mut s, &format!("{p}.self_attn"), cfg, rng)?;
        norm_params(&mut s, &format!("{p}.norm2"), c)?;
        attention_params(&mut s, &format!("{p}.cross_attn"), cfg, rng)?;
        norm_params(&mut s, &format!("{p}.norm3"), c)?;
        ff_params(&mut s, &format!("{p}.ff"), c, rng)?;
    }
    uniform(&mut s, "transformer.out.weight", &[c, c], c, rng)?;
    uniform(&mut s, "transformer.out.bias", &[1, c], c, rng)?;
    let chain = cfg.correction_chain();
    for (l, &(fi, fo)) in chain.iter().enumerate() {
        let p = format!("correction.layer{l}");
        if l + 1 == chain.len() {
            s.insert(&format!("{p}.weight"), Tensor::zeros(&[fi, fo]))?;
            s.insert(&format!("{p}.bias"), Tensor::zeros(&[1, fo]))?;
        } else {
            uniform(&mut s, &format!("{p}.weight"), &[fi, fo], fi, rng)?;
            norm_params(&mut s, &format!("{p}.norm"), fo)?;
        }
    }
    Ok(s)
}

/// `x W + b` with a `[1, out]` bias.
fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Learnable per-channel scale, then shift if the store holds one.
fn affine(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.scale"))?;
    let y = tape.mul_row(x, g)?;
    let shift = format!("{prefix}.shift");
    if !store.contains(&shift) {
        return Ok(y);
    }
    let b = tape.param(store, &shift)?;
    tape.add_row(y, b)
}

/// Per-channel normalization over the rows of `x`.
pub fn channel_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let n = tape.normalize_columns(x, eps);
    affine(tape, store, prefix, n)
}

/// Per-row normalization over the channels of `x`.
pub fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let t = tape.transpose(x)?;
    let n = tape.normalize_columns(t, eps);
    let back = tape.transpose(n)?;
    affine(tape, store, prefix, back)
}

/// Neighbor lists (self excluded) of each cloud in feature space.
fn neighbor_lists(tape: &Tape, clouds: &[Var], k: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    clouds
        .iter()
        .map(|&f| {
            let t = tape.value(f);
            let n = t.rows();
            if n < 2 {
                return Err(Error::DegenerateConfiguration(format!(
                    "edge convolution needs at least 2 points, got {n}"
                )));
            }
            let kk = k.min(n - 1);
            let nn = knn_features(t, t, kk, true)?;
            Ok((kk, nn.concat()))
        })
        .collect()
}

/// One edge-convolution layer applied to each cloud in `clouds`:
/// shared linear map of `(F_i, F_ik)` for the `K` nearest feature-space
/// neighbors, normalization, relu, max over neighbors. With
/// [`NormMode::PairBatch`] all clouds share normalization statistics.
pub fn edge_conv(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, layer: usize, clouds: &[Var]) -> Result<Vec<Var>> {
    let w = tape.param(store, &format!("dgcnn.layer{layer}.weight"))?;
    let d = tape.value(w).rows() / 2;
    for &f in clouds {
        if tape.value(f).cols() != d {
            return Err(Error::shape("edge_conv", tape.shape(f), tape.shape(w)));
        }
    }
    let neighbors = neighbor_lists(tape, clouds, cfg.k)?;
    // (F_i, F_k) W = F_i W_top + F_k W_bot, evaluated per point then gathered
    let w_top = tape.slice_rows(w, 0, d)?;
    let w_bot = tape.slice_rows(w, d, d)?;
    let mut pre = Vec::with_capacity(clouds.len());
    for (&f, (kk, nbrs)) in clouds.iter().zip(&neighbors) {
        let n = tape.value(f).rows();
        let mut a = tape.matmul(f, w_top)?;
        let b = tape.matmul(f, w_bot)?;
        if cfg.edge_difference {
            a = tape.sub(a, b)?;
        }
        let centers: Vec<usize> = (0..n * kk).map(|r| r / kk).collect();
        let ga = tape.gather_rows(a, &centers)?;
        let gb = tape.gather_rows(b, nbrs)?;
        pre.push(tape.add(ga, gb)?);
    }
    let prefix = format!("dgcnn.layer{layer}.norm");
    let normed = match cfg.norm {
        NormMode::PerCloud => pre
            .iter()
            .map(|&h| channel_norm(tape, store, &prefix, h, cfg.norm_eps))
            .collect::<Result<Vec<_>>>()?,
        NormMode::PairBatch => {
            let all = tape.vstack(&pre)?;
            let all = channel_norm(tape, store, &prefix, all, cfg.norm_eps)?;
            let mut out = Vec::with_capacity(pre.len());
            let mut start = 0;
            for &h in &pre {
                let rows = tape.value(h).rows();
                out.push(tape.slice_rows(all, start, rows)?);
                start += rows;
            }
            out
        }
    };
    normed
        .into_iter()
        .zip(&neighbors)
        .map(|(h, (kk, _))| {
            let r = tape.relu(h);
            tape.max_over_groups(r, *kk)
        })
        .collect()
}

/// Stacked edge convolutions over raw coordinates `[n, 3]`, with the
/// neighbor graph recomputed from the current features at every layer.
pub fn dgcnn_forward(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, clouds: &[Var]) -> Result<Vec<Var>> {
    let mut feats = clouds.to_vec();
    for l in 0..cfg.filters.len() {
        feats = edge_conv(tape, store, cfg, l, &feats)?;
    }
    Ok(feats)
}

/// Per-head attention matrices `softmax(Q K^T / sqrt(d_h))` and values.
fn attention_heads(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, prefix: &str, query: Var, memory: Var) -> Result<Vec<(Var, Var)>> {
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    (0..cfg.heads)
        .map(|h| {
            let wq = tape.param(store, &format!("{prefix}.head{h}.q"))?;
            let wk = tape.param(store, &format!("{prefix}.head{h}.k"))?;
            let wv = tape.param(store, &format!("{prefix}.head{h}.v"))?;
            let q = tape.matmul(query, wq)?;
            let k = tape.matmul(memory, wk)?;
            let v = tape.matmul(memory, wv)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale);
            Ok((tape.row_softmax(s), v))
        })
        .collect()
}

/// Attention weight matrices `[n_query, n_memory]`, one per head.
pub fn attention_weights(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, prefix: &str, query: Var, memory: Var) -> Result<Vec<Var>> {
    Ok(attention_heads(tape, store, cfg, prefix, query, memory)?.into_iter().map(|(a, _)| a).collect())
}

/// Multi-head scaled dot-product attention of `query` rows onto `memory`
/// rows, followed by the output projection.
pub fn multi_head_attention(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, prefix: &str, query: Var, memory: Var) -> Result<Var> {
    let heads = attention_heads(tape, store, cfg, prefix, query, memory)?
        .into_iter()
        .map(|(a, v)| tape.matmul(a, v))
        .collect::<Result<Vec<_>>>()?;
    let cat = tape.concat(&heads)?;
    linear(tape, store, &format!("{prefix}.out"), cat)
}

fn feed_forward(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{prefix}.fc1"), x)?;
    let h = tape.relu(h);
    linear(tape, store, &format!("{prefix}.fc2"), h)
}

fn encoder(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let eps = cfg.norm_eps;
    let mut z = x;
    for l in 0..cfg.encoder_layers {
        let p = format!("transformer.enc{l}");
        let n = layer_norm(tape, store, &format!("{p}.norm1"), z, eps)?;
        let a = multi_head_attention(tape, store, cfg, &format!("{p}.self_attn"), n, n)?;
        z = tape.add(z, a)?;
        let n = layer_norm(tape, store, &format!("{p}.norm2"), z, eps)?;
        let f = feed_forward(tape, store, &format!("{p}.ff"), n)?;
        z = tape.add(z, f)?;
    }
    Ok(z)
}

fn decoder(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, x: Var, memory: Var) -> Result<Var> {
    let eps = cfg.norm_eps;
    let mut z = x;
    for l in 0..cfg.decoder_layers {
        let p = format!("transformer.dec{l}");
        let n = layer_norm(tape, store, &format!("{p}.norm1"), z, eps)?;
        let a = multi_head_attention(tape, store, cfg, &format!("{p}.self_attn"), n, n)?;
        z = tape.add(z, a)?;
        let n = layer_norm(tape, store, &format!("{p}.norm2"), z, eps)?;
        let a = multi_head_attention(tape, store, cfg, &format!("{p}.cross_attn"), n, memory)?;
        z = tape.add(z, a)?;
        let n = layer_norm(tape, store, &format!("{p}.norm3"), z, eps)?;
        let f = feed_forward(tape, store, &format!("{p}.ff"), n)?;
        z = tape.add(z, f)?;
    }
    linear(tape, store, "transformer.out", z)
}

/// `Φ_X = F_X + η(F_X, F_Y)` and `Φ_Y = F_Y + η(F_Y, F_X)` with one shared
/// `η`: each cloud is encoded on its own, then decoded with cross-attention
/// onto the other cloud's encoding.
pub fn transformer_attend(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, fx: Var, fy: Var) -> Result<(Var, Var)> {
    let c = cfg.embed_dim;
    for f in [fx, fy] {
        if tape.value(f).cols() != c {
            return Err(Error::shape("transformer_attend", tape.shape(fx), tape.shape(fy)));
        }
    }
    let ex = encoder(tape, store, cfg, fx)?;
    let ey = encoder(tape, store, cfg, fy)?;
    let eta_x = decoder(tape, store, cfg, ex, ey)?;
    let eta_y = decoder(tape, store, cfg, ey, ex)?;
    Ok((tape.add(fx, eta_x)?, tape.add(fy, eta_y)?))
}

/// Per-point offsets `[n, 3]` from seeds `[n, 2c]`.
pub fn correction_walk(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, seeds: Var) -> Result<Var> {
    let chain = cfg.correction_chain();
    if tape.value(seeds).cols() != chain[0].0 {
        return Err(Error::shape("correction_walk", tape.shape(seeds), &[chain[0].0]));
    }
    let mut h = seeds;
    for l in 0..chain.len() {
        let p = format!("correction.layer{l}");
        if l + 1 == chain.len() {
            h = linear(tape, store, &p, h)?;
        } else {
            let w = tape.param(store, &format!("{p}.weight"))?;
            let z = tape.matmul(h, w)?;
            let z = channel_norm(tape, store, &format!("{p}.norm"), z, cfg.norm_eps)?;
            h = tape.relu(z);
        }
    }
    Ok(h)
}
