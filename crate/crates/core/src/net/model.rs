//! Forward pass over `[C_v ; E[text]] + pos` and its exact reverse-mode
//! gradient.
//!
//! Text positions always start at position index `n_patches`, whether or not
//! visual rows are present, so text-only pretraining and conditioned training
//! share positional embeddings.

use rayon::prelude::*;

use super::tensor::{
    add_at_b, add_bias, add_col_sums, gelu, gelu_grad, gemm, matmul, matmul_bt, softmax_in_place, Real, View, ViewMut,
};
use super::{AttentionMode, Grads, Layout, NetError, Params};
use crate::scenegen::FeatureGrid;
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Row-major `text_len x vocab_size`.
    pub logits: Vec<T>,
    pub text_len: usize,
    pub vocab_size: usize,
    /// Final residual stream over the whole sequence, when requested.
    pub hidden: Option<Vec<T>>,
    /// Normalized final hidden states for the text rows, when requested.
    pub hidden_text: Option<Vec<T>>,
}

impl<T: Real> ForwardOutput<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.logits[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn probs(&self, i: usize) -> Vec<T> {
        let mut r = self.row(i).to_vec();
        softmax_in_place(&mut r);
        r
    }
}

/// One training example: the model input and which rows carry loss.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub features: Option<&'a FeatureGrid>,
    pub text: Vec<TokenId>,
    /// `(text position, target id)` pairs scored with cross-entropy.
    pub supervised: Vec<(usize, TokenId)>,
    /// Multiplier applied to the summed cross-entropy of this example.
    pub weight: f64,
    pub mode: AttentionMode,
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], d: usize) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::ONE / (var + T::from_f64(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates gain/bias gradients when slots are given.
fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    d: usize,
    mut dgain: Option<&mut Vec<T>>,
    mut dbias: Option<&mut Vec<T>>,
) -> Vec<T> {
    let rows = dy.len() / d;
    let mut dx = vec![T::ZERO; dy.len()];
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dxhat = vec![T::ZERO; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::ZERO;
        let mut mean_dxhat_xhat = T::ZERO;
        for j in 0..d {
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
        if let Some(g) = dgain.as_deref_mut() {
            for j in 0..d {
                g[j] += dyr[j] * xh[j];
            }
        }
        if let Some(b) = dbias.as_deref_mut() {
            for j in 0..d {
                b[j] += dyr[j];
            }
        }
    }
    dx
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    n1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LnCache<T>,
    n2: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
}

struct Cache<T> {
    n_vis: usize,
    seq: usize,
    proj_z1: Vec<T>,
    proj_a1: Vec<T>,
    features: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    nf: Vec<T>,
}

fn allowed(mode: AttentionMode, n_vis: usize, i: usize, j: usize) -> bool {
    match mode {
        AttentionMode::Bidirectional => true,
        // Visual rows see only visual rows; text row i sees all visual rows
        // and text rows up to itself.
        AttentionMode::Causal => j < n_vis || (i >= n_vis && j <= i),
    }
}

fn validate_text<T: Real>(params: &Params<T>, text: &[TokenId]) -> Result<(), NetError> {
    params.config.check_text(text)
}

fn features_as<T: Real>(params: &Params<T>, f: &FeatureGrid) -> Result<Vec<T>, NetError> {
    let c = &params.config;
    if f.d_v != c.d_v || f.n_patches() != c.n_patches || f.data.len() != c.n_patches * c.d_v {
        return Err(NetError::Shape(format!(
            "features are {}x{} (d_v {}), model expects {} patches of width {}",
            f.grid_size, f.grid_size, f.d_v, c.n_patches, c.d_v
        )));
    }
    Ok(f.data.iter().map(|&x| T::from_f64(x as f64)).collect())
}

/// `C_v = fc2(GELU(fc1(features)))`, one row per patch in row-major grid order.
pub fn project<T: Real>(params: &Params<T>, features: &FeatureGrid) -> Result<Vec<T>, NetError> {
    let f = features_as(params, features)?;
    Ok(project_raw(params, &f).2)
}

fn project_raw<T: Real>(params: &Params<T>, f: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = &params.config;
    let (p, d) = (c.n_patches, c.d_model);
    let mut z1 = matmul(f, p, c.d_v, params.get(Layout::PROJ_W1), d);
    add_bias(&mut z1, params.get(Layout::PROJ_B1));
    let a1: Vec<T> = z1.iter().map(|&x| gelu(x)).collect();
    let mut cv = matmul(&a1, p, d, params.get(Layout::PROJ_W2), d);
    add_bias(&mut cv, params.get(Layout::PROJ_B2));
    (z1, a1, cv)
}

/// Embeds `[cv ; E[text]]` with positions and runs the trunk.
fn run<T: Real>(
    params: &Params<T>,
    cv: Option<&[T]>,
    text: &[TokenId],
    mode: AttentionMode,
) -> Result<(Vec<T>, Vec<BlockCache<T>>, usize), NetError> {
    validate_text(params, text)?;
    let c = &params.config;
    let d = c.d_model;
    let n_vis = match cv {
        Some(cv) if cv.len() != c.n_patches * d => {
            return Err(NetError::Shape(format!("C_v has {} values, expected {}", cv.len(), c.n_patches * d)))
        }
        Some(_) => c.n_patches,
        None => 0,
    };
    let seq = n_vis + text.len();
    let tok = params.get(Layout::TOK_EMB);
    let pos = params.get(Layout::POS_EMB);
    let mut x = vec![T::ZERO; seq * d];
    if let Some(cv) = cv {
        x[..n_vis * d].copy_from_slice(cv);
        for (xv, pv) in x[..n_vis * d].iter_mut().zip(&pos[..n_vis * d]) {
            *xv += *pv;
        }
    }
    for (i, &id) in text.iter().enumerate() {
        let row = &mut x[(n_vis + i) * d..(n_vis + i + 1) * d];
        let e = &tok[id as usize * d..(id as usize + 1) * d];
        let pp = &pos[(c.n_patches + i) * d..(c.n_patches + i + 1) * d];
        for j in 0..d {
            row[j] = e[j] + pp[j];
        }
    }
    let mut caches = Vec::with_capacity(c.n_layers);
    for layer in 0..c.n_layers {
        let (next, cache) = block_forward(params, layer, &x, seq, n_vis, mode);
        x = next;
        caches.push(cache);
    }
    Ok((x, caches, n_vis))
}

fn block_forward<T: Real>(
    params: &Params<T>,
    layer: usize,
    x: &[T],
    seq: usize,
    n_vis: usize,
    mode: AttentionMode,
) -> (Vec<T>, BlockCache<T>) {
    let c = &params.config;
    let (d, f, nh, dh) = (c.d_model, c.ffn_dim(), c.n_heads, c.head_dim());
    let l = params.layout();
    let w = |part| params.get(l.block(layer, part));

    let (n1, ln1) = layer_norm(x, w(Layout::LN1_G), w(Layout::LN1_B), d);
    let mut qkv = matmul(&n1, seq, d, w(Layout::QKV_W), 3 * d);
    add_bias(&mut qkv, w(Layout::QKV_B));

    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::ZERO; nh * seq * seq];
    let mut attn = vec![T::ZERO; seq * d];
    for h in 0..nh {
        let q = View::strided(&qkv[h * dh..], seq, dh, 3 * d, 1);
        let k = View::strided(&qkv[d + h * dh..], seq, dh, 3 * d, 1);
        let v = View::strided(&qkv[2 * d + h * dh..], seq, dh, 3 * d, 1);
        let p = &mut probs[h * seq * seq..(h + 1) * seq * seq];
        gemm(scale, q, k.t(), T::ZERO, ViewMut::new(p, seq, seq));
        for i in 0..seq {
            let row = &mut p[i * seq..(i + 1) * seq];
            if mode == AttentionMode::Causal {
                for (j, v) in row.iter_mut().enumerate() {
                    if !allowed(mode, n_vis, i, j) {
                        *v = T::from_f64(f64::NEG_INFINITY);
                    }
                }
            }
            softmax_in_place(row);
        }
        gemm(T::ONE, View::new(p, seq, seq), v, T::ZERO, ViewMut::strided(&mut attn[h * dh..], seq, dh, d, 1));
    }
    let mut out = matmul(&attn, seq, d, w(Layout::OUT_W), d);
    add_bias(&mut out, w(Layout::OUT_B));
    let h1: Vec<T> = x.iter().zip(&out).map(|(&a, &b)| a + b).collect();

    let (n2, ln2) = layer_norm(&h1, w(Layout::LN2_G), w(Layout::LN2_B), d);
    let mut f1 = matmul(&n2, seq, d, w(Layout::FF1_W), f);
    add_bias(&mut f1, w(Layout::FF1_B));
    let g: Vec<T> = f1.iter().map(|&v| gelu(v)).collect();
    let mut f2 = matmul(&g, seq, f, w(Layout::FF2_W), d);
    add_bias(&mut f2, w(Layout::FF2_B));
    let x_out: Vec<T> = h1.iter().zip(&f2).map(|(&a, &b)| a + b).collect();

    (x_out, BlockCache { ln1, n1, qkv, probs, attn, ln2, n2, f1, g })
}

fn head<T: Real>(params: &Params<T>, final_x: &[T], n_vis: usize, text_len: usize) -> (Vec<T>, LnCache<T>, Vec<T>) {
    let c = &params.config;
    let l = params.layout();
    let d = c.d_model;
    let text_rows = &final_x[n_vis * d..(n_vis + text_len) * d];
    let (nf, lnf) = layer_norm(text_rows, params.get(l.lnf_g()), params.get(l.lnf_b()), d);
    let mut logits = matmul(&nf, text_len, d, params.get(l.head_w()), c.vocab_size);
    add_bias(&mut logits, params.get(l.head_b()));
    (logits, lnf, nf)
}

/// Logits for the text positions of `[cv ; text]`.
pub fn forward<T: Real>(
    params: &Params<T>,
    cv: Option<&[T]>,
    text: &[TokenId],
    mode: AttentionMode,
) -> Result<ForwardOutput<T>, NetError> {
    forward_with(params, cv, text, mode, false)
}

pub(crate) fn forward_with<T: Real>(
    params: &Params<T>,
    cv: Option<&[T]>,
    text: &[TokenId],
    mode: AttentionMode,
    keep_hidden: bool,
) -> Result<ForwardOutput<T>, NetError> {
    let (final_x, _, n_vis) = run(params, cv, text, mode)?;
    let (logits, _, nf) = head(params, &final_x, n_vis, text.len());
    Ok(ForwardOutput {
        logits,
        text_len: text.len(),
        vocab_size: params.config.vocab_size,
        hidden_text: keep_hidden.then_some(nf),
        hidden: keep_hidden.then_some(final_x),
    })
}

impl<T: Real> ForwardOutput<T> {
    /// Same as [`forward`] but also retains hidden states.
    pub fn with_hidden(
        params: &Params<T>,
        cv: Option<&[T]>,
        text: &[TokenId],
        mode: AttentionMode,
    ) -> Result<Self, NetError> {
        forward_with(params, cv, text, mode, true)
    }
}

fn forward_cached<T: Real>(params: &Params<T>, ex: &Example<'_>) -> Result<(Vec<T>, Cache<T>), NetError> {
    let (features, z1, a1, cv) = match ex.features {
        Some(f) => {
            let f = features_as(params, f)?;
            let (z1, a1, cv) = project_raw(params, &f);
            (f, z1, a1, Some(cv))
        }
        None => (Vec::new(), Vec::new(), Vec::new(), None),
    };
    let (final_x, blocks, n_vis) = run(params, cv.as_deref(), &ex.text, ex.mode)?;
    let (logits, lnf, nf) = head(params, &final_x, n_vis, ex.text.len());
    let seq = n_vis + ex.text.len();
    Ok((logits, Cache { n_vis, seq, proj_z1: z1, proj_a1: a1, features, blocks, lnf, nf }))
}

/// Cross-entropy over supervised rows; returns (loss, dlogits).
fn supervised_ce<T: Real>(logits: &[T], vocab: usize, ex: &Example<'_>) -> Result<(f64, Vec<T>), NetError> {
    let mut dlogits = vec![T::ZERO; logits.len()];
    let mut total = 0.0f64;
    let w = T::from_f64(ex.weight);
    for &(pos, target) in &ex.supervised {
        if target as usize >= vocab {
            return Err(NetError::Vocab { id: target, vocab_size: vocab });
        }
        let row = &logits[pos * vocab..(pos + 1) * vocab];
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
        let lse = max + row.iter().map(|&v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        total += lse - row[target as usize].to_f64();
        let drow = &mut dlogits[pos * vocab..(pos + 1) * vocab];
        for (dv, pv) in drow.iter_mut().zip(&p) {
            *dv = *pv * w;
        }
        drow[target as usize] -= w;
    }
    Ok((total * ex.weight, dlogits))
}

fn backward<T: Real>(params: &Params<T>, ex: &Example<'_>, cache: &Cache<T>, dlogits: &[T], grads: &mut Grads<T>) {
    let c = &params.config;
    let l = params.layout();
    let (d, v) = (c.d_model, c.vocab_size);
    let text_len = ex.text.len();
    let (n_vis, seq) = (cache.n_vis, cache.seq);

    // Head.
    if let Some(g) = grads.slot(l.head_w()) {
        add_at_b(g, &cache.nf, text_len, d, dlogits, v);
    }
    if let Some(g) = grads.slot(l.head_b()) {
        add_col_sums(g, dlogits);
    }
    let dnf = matmul_bt(dlogits, text_len, v, params.get(l.head_w()), d);
    let (dg, db) = two_slots(grads, l.lnf_g(), l.lnf_b());
    let dtext = layer_norm_backward(&dnf, &cache.lnf, params.get(l.lnf_g()), d, dg, db);
    let mut dx = vec![T::ZERO; seq * d];
    dx[n_vis * d..].copy_from_slice(&dtext);

    for layer in (0..c.n_layers).rev() {
        dx = block_backward(params, layer, &cache.blocks[layer], &dx, seq, ex.mode, n_vis, grads);
    }

    // Embeddings.
    if let Some(g) = grads.slot(Layout::POS_EMB) {
        for (gv, dv) in g[..n_vis * d].iter_mut().zip(&dx[..n_vis * d]) {
            *gv += *dv;
        }
        let off = c.n_patches * d;
        for (gv, dv) in g[off..off + text_len * d].iter_mut().zip(&dx[n_vis * d..]) {
            *gv += *dv;
        }
    }
    if let Some(g) = grads.slot(Layout::TOK_EMB) {
        for (i, &id) in ex.text.iter().enumerate() {
            let dst = &mut g[id as usize * d..(id as usize + 1) * d];
            for (gv, dv) in dst.iter_mut().zip(&dx[(n_vis + i) * d..(n_vis + i + 1) * d]) {
                *gv += *dv;
            }
        }
    }

    // Projector.
    if n_vis > 0 {
        let dcv = &dx[..n_vis * d];
        let p = c.n_patches;
        if let Some(g) = grads.slot(Layout::PROJ_W2) {
            add_at_b(g, &cache.proj_a1, p, d, dcv, d);
        }
        if let Some(g) = grads.slot(Layout::PROJ_B2) {
            add_col_sums(g, dcv);
        }
        if grads.is_tracked(Layout::PROJ_W1) || grads.is_tracked(Layout::PROJ_B1) {
            let da1 = matmul_bt(dcv, p, d, params.get(Layout::PROJ_W2), d);
            let dz1: Vec<T> = da1.iter().zip(&cache.proj_z1).map(|(&a, &z)| a * gelu_grad(z)).collect();
            if let Some(g) = grads.slot(Layout::PROJ_W1) {
                add_at_b(g, &cache.features, p, c.d_v, &dz1, d);
            }
            if let Some(g) = grads.slot(Layout::PROJ_B1) {
                add_col_sums(g, &dz1);
            }
        }
    }
}

fn two_slots<T>(grads: &mut Grads<T>, a: usize, b: usize) -> (Option<&mut Vec<T>>, Option<&mut Vec<T>>) {
    debug_assert!(a < b);
    let (lo, hi) = grads.tensors.split_at_mut(b);
    (lo[a].as_mut(), hi[0].as_mut())
}

#[allow(clippy::too_many_arguments)]
fn block_backward<T: Real>(
    params: &Params<T>,
    layer: usize,
    bc: &BlockCache<T>,
    dx_out: &[T],
    seq: usize,
    mode: AttentionMode,
    n_vis: usize,
    grads: &mut Grads<T>,
) -> Vec<T> {
    let c = &params.config;
    let (d, f, nh, dh) = (c.d_model, c.ffn_dim(), c.n_heads, c.head_dim());
    let l = params.layout();
    let idx = |part| l.block(layer, part);
    let w = |part| params.get(idx(part));

    // Feed-forward: x_out = h1 + fc2(gelu(fc1(ln2(h1)))).
    if let Some(g) = grads.slot(idx(Layout::FF2_W)) {
        add_at_b(g, &bc.g, seq, f, dx_out, d);
    }
    if let Some(g) = grads.slot(idx(Layout::FF2_B)) {
        add_col_sums(g, dx_out);
    }
    let dg = matmul_bt(dx_out, seq, d, w(Layout::FF2_W), f);
    let df1: Vec<T> = dg.iter().zip(&bc.f1).map(|(&a, &z)| a * gelu_grad(z)).collect();
    if let Some(g) = grads.slot(idx(Layout::FF1_W)) {
        add_at_b(g, &bc.n2, seq, d, &df1, f);
    }
    if let Some(g) = grads.slot(idx(Layout::FF1_B)) {
        add_col_sums(g, &df1);
    }
    let dn2 = matmul_bt(&df1, seq, f, w(Layout::FF1_W), d);
    let (dgain, dbias) = two_slots(grads, idx(Layout::LN2_G), idx(Layout::LN2_B));
    let dln2 = layer_norm_backward(&dn2, &bc.ln2, w(Layout::LN2_G), d, dgain, dbias);
    let dh1: Vec<T> = dx_out.iter().zip(&dln2).map(|(&a, &b)| a + b).collect();

    // Attention: h1 = x + out(attn(ln1(x))).
    if let Some(g) = grads.slot(idx(Layout::OUT_W)) {
        add_at_b(g, &bc.attn, seq, d, &dh1, d);
    }
    if let Some(g) = grads.slot(idx(Layout::OUT_B)) {
        add_col_sums(g, &dh1);
    }
    let dattn = matmul_bt(&dh1, seq, d, w(Layout::OUT_W), d);
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dqkv = vec![T::ZERO; seq * 3 * d];
    let mut dp = vec![T::ZERO; seq * seq];
    for h in 0..nh {
        let p = &bc.probs[h * seq * seq..(h + 1) * seq * seq];
        let q = View::strided(&bc.qkv[h * dh..], seq, dh, 3 * d, 1);
        let k = View::strided(&bc.qkv[d + h * dh..], seq, dh, 3 * d, 1);
        let v = View::strided(&bc.qkv[2 * d + h * dh..], seq, dh, 3 * d, 1);
        let do_h = View::strided(&dattn[h * dh..], seq, dh, d, 1);
        // dV = P^T dO
        gemm(
            T::ONE,
            View::new(p, seq, seq).t(),
            do_h,
            T::ZERO,
            ViewMut::strided(&mut dqkv[2 * d + h * dh..], seq, dh, 3 * d, 1),
        );
        // dP = dO V^T, then softmax backward in place.
        gemm(T::ONE, do_h, v.t(), T::ZERO, ViewMut::new(&mut dp, seq, seq));
        for i in 0..seq {
            let pr = &p[i * seq..(i + 1) * seq];
            let dr = &mut dp[i * seq..(i + 1) * seq];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (j, (dv, &pv)) in dr.iter_mut().zip(pr).enumerate() {
                *dv = if allowed(mode, n_vis, i, j) { pv * (*dv - dot) } else { T::ZERO };
            }
        }
        // dQ = dS K * scale, dK = dS^T Q * scale
        gemm(scale, View::new(&dp, seq, seq), k, T::ZERO, ViewMut::strided(&mut dqkv[h * dh..], seq, dh, 3 * d, 1));
        gemm(
            scale,
            View::new(&dp, seq, seq).t(),
            q,
            T::ZERO,
            ViewMut::strided(&mut dqkv[d + h * dh..], seq, dh, 3 * d, 1),
        );
    }
    if let Some(g) = grads.slot(idx(Layout::QKV_W)) {
        add_at_b(g, &bc.n1, seq, d, &dqkv, 3 * d);
    }
    if let Some(g) = grads.slot(idx(Layout::QKV_B)) {
        add_col_sums(g, &dqkv);
    }
    let dn1 = matmul_bt(&dqkv, seq, 3 * d, w(Layout::QKV_W), d);
    let (dgain, dbias) = two_slots(grads, idx(Layout::LN1_G), idx(Layout::LN1_B));
    let dln1 = layer_norm_backward(&dn1, &bc.ln1, w(Layout::LN1_G), d, dgain, dbias);
    dh1.iter().zip(&dln1).map(|(&a, &b)| a + b).collect()
}

/// Mean over the batch of each example's weighted cross-entropy, with exact
/// gradients for the tensors flagged in `trainable`.
///
/// Examples are processed in parallel and their gradients summed in batch
/// order, so results do not depend on thread scheduling.
pub fn loss_and_grads<T: Real>(
    params: &Params<T>,
    batch: &[Example<'_>],
    trainable: &[bool],
) -> Result<(f64, Grads<T>), NetError> {
    if batch.is_empty() {
        return Err(NetError::Shape("empty batch".into()));
    }
    if trainable.len() != params.tensors.len() {
        return Err(NetError::Shape(format!(
            "trainable mask has {} entries for {} tensors",
            trainable.len(),
            params.tensors.len()
        )));
    }
    let per_example: Vec<Result<(f64, Grads<T>), NetError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut g = Grads::zeros(params, trainable);
            if ex.supervised.is_empty() {
                validate_text(params, &ex.text)?;
                return Ok((0.0, g));
            }
            let (logits, cache) = forward_cached(params, ex)?;
            let (loss, dlogits) = supervised_ce(&logits, params.config.vocab_size, ex)?;
            if !loss.is_finite() {
                return Err(NetError::NonFinite { instance: i });
            }
            backward(params, ex, &cache, &dlogits, &mut g);
            Ok((loss, g))
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = Grads::zeros(params, trainable);
    let mut loss = 0.0;
    for r in per_example {
        let (l, g) = r?;
        loss += l * scale;
        total.add_scaled(&g, T::from_f64(scale));
    }
    Ok((loss, total))
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, ALL_GROUPS};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(d: usize, vocab: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            n_layers: 1,
            n_heads: heads,
            d_v: 6,
            n_patches: 4,
            max_text_len: 32,
            vocab_size: vocab,
            attention_mode: AttentionMode::Bidirectional,
            vocab_hash: None,
        }
    }

    fn grid(rng: &mut ChaCha8Rng, d_v: usize) -> FeatureGrid {
        FeatureGrid { grid_size: 2, d_v, data: (0..4 * d_v).map(|_| rng.gen_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn logits_shape_and_normalization() {
        let c = tiny(16, 30, 2);
        let p = Params::<f32>::init(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = grid(&mut rng, 6);
        let cv = project(&p, &f).unwrap();
        assert_eq!(cv.len(), 4 * 16);
        let text: Vec<TokenId> = (0..16).map(|i| (i % 30) as TokenId).collect();
        let out = forward(&p, Some(&cv), &text, AttentionMode::Bidirectional).unwrap();
        assert_eq!(out.logits.len(), 16 * 30);
        for i in 0..16 {
            let s: f32 = out.probs(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_features_project_to_zero() {
        let c = tiny(16, 30, 2);
        let p = Params::<f32>::init(&c, 1).unwrap();
        let f = FeatureGrid { grid_size: 2, d_v: 6, data: vec![0.0; 24] };
        assert!(project(&p, &f).unwrap().iter().all(|&x| x == 0.0));
        let wrong = FeatureGrid { grid_size: 3, d_v: 6, data: vec![0.0; 54] };
        assert!(matches!(project(&p, &wrong), Err(NetError::Shape(_))));
    }

    #[test]
    fn single_cell_projector_hand_value() {
        let c = ModelConfig { d_model: 1, n_heads: 1, d_v: 1, n_patches: 1, ..tiny(1, 3, 1) };
        let mut p = Params::<f64>::init(&c, 0).unwrap();
        p.get_mut(Layout::PROJ_W1)[0] = 2.0;
        p.get_mut(Layout::PROJ_B1)[0] = -0.5;
        p.get_mut(Layout::PROJ_W2)[0] = 3.0;
        p.get_mut(Layout::PROJ_B2)[0] = 0.25;
        let f = FeatureGrid { grid_size: 1, d_v: 1, data: vec![0.75] };
        // z = 2*0.75 - 0.5 = 1; GELU(1) = Phi(1) = 0.841344746068543
        let want = 3.0 * 0.841_344_746_068_543 + 0.25;
        assert!((project(&p, &f).unwrap()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn forward_errors() {
        let c = tiny(16, 30, 2);
        let p = Params::<f32>::init(&c, 1).unwrap();
        assert!(matches!(
            forward(&p, None, &[3, 30], AttentionMode::Bidirectional),
            Err(NetError::Vocab { id: 30, .. })
        ));
        let long = vec![3; 33];
        assert!(matches!(forward(&p, None, &long, AttentionMode::Causal), Err(NetError::Length { len: 33, .. })));
    }

    #[test]
    fn causal_mode_hides_future_tokens() {
        let c = tiny(16, 30, 4);
        let p = Params::<f32>::init(&c, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cv = project(&p, &grid(&mut rng, 6)).unwrap();
        let text: Vec<TokenId> = (0..12).map(|_| rng.gen_range(0..30)).collect();
        let base = forward(&p, Some(&cv), &text, AttentionMode::Causal).unwrap();
        for j in 0..12 {
            let mut t2 = text.clone();
            t2[j] = (t2[j] + 1) % 30;
            let out = forward(&p, Some(&cv), &t2, AttentionMode::Causal).unwrap();
            for i in 0..j {
                assert_eq!(base.row(i), out.row(i), "position {i} saw token {j}");
            }
            let bi = forward(&p, Some(&cv), &t2, AttentionMode::Bidirectional).unwrap();
            let b0 = forward(&p, Some(&cv), &text, AttentionMode::Bidirectional).unwrap();
            if j > 0 {
                assert_ne!(b0.row(0), bi.row(0));
            }
        }
    }

    #[test]
    fn empty_supervision_gives_zero_loss_and_grads() {
        let c = tiny(16, 30, 2);
        let p = Params::<f64>::init(&c, 1).unwrap();
        let ex = Example {
            features: None,
            text: vec![3, 4, 5],
            supervised: vec![],
            weight: 1.0,
            mode: AttentionMode::Bidirectional,
        };
        let mask = p.trainable_mask(&ALL_GROUPS);
        let (loss, g) = loss_and_grads(&p, &[ex], &mask).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.all_zero());
    }

    #[test]
    fn frozen_tensors_have_no_gradient_entry() {
        let c = tiny(16, 30, 2);
        let p = Params::<f32>::init(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = grid(&mut rng, 6);
        let ex = Example {
            features: Some(&f),
            text: vec![3, 1, 5],
            supervised: vec![(1, 9)],
            weight: 1.0,
            mode: AttentionMode::Bidirectional,
        };
        let mask = p.trainable_mask(&[super::super::TensorGroup::Projector]);
        let (_, g) = loss_and_grads(&p, &[ex], &mask).unwrap();
        for (i, t) in p.tensors.iter().enumerate() {
            assert_eq!(g.get(i).is_some(), t.name.starts_with("projector"), "{}", t.name);
        }
        assert!(!g.get(Layout::PROJ_W1).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let c = tiny(16, 148, 2);
        let mut p = Params::<f64>::init(&c, 1).unwrap();
        let hw = p.layout().head_w();
        p.get_mut(hw).iter_mut().for_each(|x| *x = 0.0);
        let ex = Example {
            features: None,
            text: vec![3, 1],
            supervised: vec![(1, 7)],
            weight: 1.0,
            mode: AttentionMode::Bidirectional,
        };
        let (loss, _) = loss_and_grads(&p, &[ex], &p.trainable_mask(&ALL_GROUPS)).unwrap();
        assert!((loss - 148f64.ln()).abs() < 1e-12);
    }
}
