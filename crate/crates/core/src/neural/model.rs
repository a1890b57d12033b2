//! Pre-norm encoder-decoder transformer: forward pass, dictionary loss,
//! hand-derived backward pass and greedy dictionary decoding.

use ndarray::{Array2, Axis};

use super::layers::{
    attend, attn_bwd, attn_fwd, ff_bwd, ff_fwd, linear_bwd, linear_fwd, norm_bwd, norm_fwd,
    project_kv, softmax_from, AttnCache, FfCache, KeyValues, NormCache,
};
use super::params::{ModelParams, Scalar};
use crate::cipher::{CipherExample, DecodeMap};
use crate::error::{Error, Result};
use crate::textcorpus::{TokenSeq, ALPHABET_SIZE, BOS, FIRST_CONTENT, VOCAB_SIZE};

struct EncoderLayerCache<F> {
    norm_attn: NormCache<F>,
    attn: AttnCache<F>,
    norm_ff: NormCache<F>,
    ff: FfCache<F>,
}

struct DecoderLayerCache<F> {
    norm_self: NormCache<F>,
    self_attn: AttnCache<F>,
    norm_cross: NormCache<F>,
    cross_attn: AttnCache<F>,
    norm_ff: NormCache<F>,
    ff: FfCache<F>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache<F> {
    src: Vec<u8>,
    tgt: Vec<u8>,
    encoder: Vec<EncoderLayerCache<F>>,
    enc_norm: NormCache<F>,
    decoder: Vec<DecoderLayerCache<F>>,
    dec_norm: NormCache<F>,
    dec_out: Array2<F>,
}

fn embed<F: Scalar>(p: &ModelParams<F>, ids: &[u8]) -> Array2<F> {
    let d = p.config.d_model;
    let scale = F::c((d as f64).sqrt());
    let mut x = Array2::zeros((ids.len(), d));
    for (pos, (mut row, &id)) in x.rows_mut().into_iter().zip(ids).enumerate() {
        row.assign(&p.embed.row(id as usize));
        row *= scale;
        row += &p.positions.row(pos);
    }
    x
}

fn embed_bwd<F: Scalar>(g: &mut ModelParams<F>, ids: &[u8], dx: &Array2<F>) {
    let scale = F::c((g.config.d_model as f64).sqrt());
    for (&id, row) in ids.iter().zip(dx.rows()) {
        let mut target = g.embed.row_mut(id as usize);
        target.scaled_add(scale, &row);
    }
}

fn encode_cached<F: Scalar>(
    p: &ModelParams<F>,
    src: &[u8],
) -> (Array2<F>, Vec<EncoderLayerCache<F>>, NormCache<F>) {
    let heads = p.config.n_heads;
    let mut x = embed(p, src);
    let mut caches = Vec::with_capacity(p.encoder.len());
    for layer in &p.encoder {
        let (h, norm_attn) = norm_fwd(&layer.norm_attn, &x);
        let (a, attn) = attn_fwd(&layer.attn, &h, &h, heads, false);
        x += &a;
        let (h, norm_ff) = norm_fwd(&layer.norm_ff, &x);
        let (f, ff) = ff_fwd(&layer.ff, &h);
        x += &f;
        caches.push(EncoderLayerCache {
            norm_attn,
            attn,
            norm_ff,
            ff,
        });
    }
    let (out, enc_norm) = norm_fwd(&p.enc_norm, &x);
    (out, caches, enc_norm)
}

fn check_ids<F>(p: &ModelParams<F>, src: &[u8], tgt: &[u8]) -> Result<()> {
    if let Some(&bad) = src.iter().chain(tgt).find(|&&id| id as usize >= VOCAB_SIZE) {
        return Err(Error::InvalidTokenId(bad as u32));
    }
    if src.len() > p.config.max_src_len {
        return Err(Error::MalformedSequence(format!(
            "source length {} exceeds {}",
            src.len(),
            p.config.max_src_len
        )));
    }
    if tgt.first() != Some(&BOS) || tgt.len() > p.config.tgt_len {
        return Err(Error::MalformedSequence(
            "target prefix must start with BOS and fit tgt_len".into(),
        ));
    }
    Ok(())
}

/// Teacher-forced forward pass keeping every activation for backward.
pub fn forward_cached<F: Scalar>(
    p: &ModelParams<F>,
    src: &[u8],
    tgt: &[u8],
) -> (Array2<F>, ForwardCache<F>) {
    let heads = p.config.n_heads;
    let (mem, encoder, enc_norm) = encode_cached(p, src);
    let mut y = embed(p, tgt);
    let mut decoder = Vec::with_capacity(p.decoder.len());
    for layer in &p.decoder {
        let (h, norm_self) = norm_fwd(&layer.norm_self, &y);
        let (a, self_attn) = attn_fwd(&layer.self_attn, &h, &h, heads, true);
        y += &a;
        let (h, norm_cross) = norm_fwd(&layer.norm_cross, &y);
        let (a, cross_attn) = attn_fwd(&layer.cross_attn, &h, &mem, heads, false);
        y += &a;
        let (h, norm_ff) = norm_fwd(&layer.norm_ff, &y);
        let (f, ff) = ff_fwd(&layer.ff, &h);
        y += &f;
        decoder.push(DecoderLayerCache {
            norm_self,
            self_attn,
            norm_cross,
            cross_attn,
            norm_ff,
            ff,
        });
    }
    let (dec_out, dec_norm) = norm_fwd(&p.dec_norm, &y);
    let logits = linear_fwd(&p.out, &dec_out.view());
    (
        logits,
        ForwardCache {
            src: src.to_vec(),
            tgt: tgt.to_vec(),
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            dec_out,
        },
    )
}

/// Unnormalized logits, one row of 29 per target-prefix position.
pub fn forward<F: Scalar>(
    p: &ModelParams<F>,
    src: &TokenSeq,
    tgt_prefix: &[u8],
) -> Result<Array2<F>> {
    check_ids(p, src.ids(), tgt_prefix)?;
    Ok(forward_cached(p, src.ids(), tgt_prefix).0)
}

/// Accumulates the gradient of the loss whose logit gradient is `dlogits`
/// into `g`.
pub fn backward<F: Scalar>(
    p: &ModelParams<F>,
    cache: &ForwardCache<F>,
    dlogits: &Array2<F>,
    g: &mut ModelParams<F>,
) {
    let dz = linear_bwd(&p.out, &mut g.out, &cache.dec_out.view(), dlogits);
    let mut dy = norm_bwd(&p.dec_norm, &mut g.dec_norm, &cache.dec_norm, &dz);
    let mut dmem: Array2<F> = Array2::zeros((cache.src.len(), p.config.d_model));
    for ((layer, gl), c) in p
        .decoder
        .iter()
        .zip(g.decoder.iter_mut())
        .zip(&cache.decoder)
        .rev()
    {
        let df = ff_bwd(&layer.ff, &mut gl.ff, &c.ff, &dy);
        dy += &norm_bwd(&layer.norm_ff, &mut gl.norm_ff, &c.norm_ff, &df);

        let (dq, dm) = attn_bwd(&layer.cross_attn, &mut gl.cross_attn, &c.cross_attn, &dy);
        dmem += &dm;
        dy += &norm_bwd(&layer.norm_cross, &mut gl.norm_cross, &c.norm_cross, &dq);

        let (dq, dkv) = attn_bwd(&layer.self_attn, &mut gl.self_attn, &c.self_attn, &dy);
        let dh = dq + dkv;
        dy += &norm_bwd(&layer.norm_self, &mut gl.norm_self, &c.norm_self, &dh);
    }
    embed_bwd(g, &cache.tgt, &dy);

    let mut dx = norm_bwd(&p.enc_norm, &mut g.enc_norm, &cache.enc_norm, &dmem);
    for ((layer, gl), c) in p
        .encoder
        .iter()
        .zip(g.encoder.iter_mut())
        .zip(&cache.encoder)
        .rev()
    {
        let df = ff_bwd(&layer.ff, &mut gl.ff, &c.ff, &dx);
        dx += &norm_bwd(&layer.norm_ff, &mut gl.norm_ff, &c.norm_ff, &df);
        let (dq, dkv) = attn_bwd(&layer.attn, &mut gl.attn, &c.attn, &dx);
        let dh = dq + dkv;
        dx += &norm_bwd(&layer.norm_attn, &mut gl.norm_attn, &c.norm_attn, &dh);
    }
    embed_bwd(g, &cache.src, &dx);
}

/// Teacher-forced decoder input `[BOS, t_0, .., t_25]`. The logits at
/// position `j` predict dictionary slot `j`; the row that would predict EOS
/// is never computed because the loss excludes it.
pub fn decoder_input(target: &DecodeMap) -> Vec<u8> {
    let mut tgt = Vec::with_capacity(ALPHABET_SIZE);
    tgt.push(BOS);
    tgt.extend_from_slice(&target[..ALPHABET_SIZE - 1]);
    tgt
}

/// Mean over the 27 dictionary slots of `-ln softmax(logits)[target]`, in nats.
pub fn loss<F: Scalar>(logits: &Array2<F>, target: &DecodeMap) -> f64 {
    slot_rows(logits)
        .iter()
        .zip(target)
        .map(|(row, &t)| -row[t as usize].ln())
        .sum::<f64>()
        / ALPHABET_SIZE as f64
}

/// Softmax rows of the 27 dictionary positions, normalized over the content
/// symbols only (BOS and EOS get probability 0).
pub fn slot_rows<F: Scalar>(logits: &Array2<F>) -> Vec<Vec<f64>> {
    logits
        .axis_iter(Axis(0))
        .take(ALPHABET_SIZE)
        .map(|row| softmax_from(row, FIRST_CONTENT as usize))
        .collect()
}

/// Loss and its gradient with respect to the logits, the latter multiplied
/// by `weight` (e.g. `1 / batch_size`).
pub fn loss_and_dlogits<F: Scalar>(
    logits: &Array2<F>,
    target: &DecodeMap,
    weight: f64,
) -> (f64, Array2<F>) {
    let rows = slot_rows(logits);
    let mut d = Array2::zeros(logits.raw_dim());
    let per_slot = weight / ALPHABET_SIZE as f64;
    let mut total = 0.0;
    for (j, (row, &t)) in rows.iter().zip(target).enumerate() {
        total -= row[t as usize].ln();
        for (k, &pk) in row.iter().enumerate() {
            let onehot = if k == t as usize { 1.0 } else { 0.0 };
            d[[j, k]] = F::c((pk - onehot) * per_slot);
        }
    }
    (total / ALPHABET_SIZE as f64, d)
}

/// Forward, loss and backward for one example; gradients scaled by `weight`
/// are accumulated into `g`. Returns the unweighted loss.
pub fn example_loss_and_grad<F: Scalar>(
    p: &ModelParams<F>,
    ex: &CipherExample,
    weight: f64,
    g: &mut ModelParams<F>,
) -> f64 {
    let tgt = decoder_input(&ex.decode_target);
    let (logits, cache) = forward_cached(p, ex.ciphertext.ids(), &tgt);
    let (l, dlogits) = loss_and_dlogits(&logits, &ex.decode_target, weight);
    backward(p, &cache, &dlogits, g);
    l
}

/// Mean batch loss and its exact gradient. Examples are reduced in order.
pub fn batch_loss_and_grad<F: Scalar>(
    p: &ModelParams<F>,
    batch: &[&CipherExample],
) -> (f64, ModelParams<F>) {
    let mut g = p.zeros_like();
    let w = 1.0 / batch.len() as f64;
    let total: f64 = batch
        .iter()
        .map(|ex| example_loss_and_grad(p, ex, w, &mut g))
        .sum();
    (total / batch.len() as f64, g)
}

pub fn example_loss<F: Scalar>(p: &ModelParams<F>, ex: &CipherExample) -> f64 {
    loss(&teacher_forced_logits(p, ex), &ex.decode_target)
}

pub fn teacher_forced_logits<F: Scalar>(p: &ModelParams<F>, ex: &CipherExample) -> Array2<F> {
    forward_cached(p, ex.ciphertext.ids(), &decoder_input(&ex.decode_target)).0
}

/// Teacher-forced softmax rows for the 27 slots given the true dictionary.
pub fn teacher_forced_rows<F: Scalar>(p: &ModelParams<F>, ex: &CipherExample) -> Vec<Vec<f64>> {
    slot_rows(&teacher_forced_logits(p, ex))
}

/// Most probable content symbol of a 29-wide row; ties go to the lower ID.
pub fn argmax_symbol(row: &[f64]) -> u8 {
    (FIRST_CONTENT as usize..VOCAB_SIZE)
        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
        .expect("non-empty range") as u8
}

/// Greedy dictionary read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryPrediction {
    /// Slot `j`: argmax plaintext ID (restricted to 2..=28) for cipher ID `2 + j`.
    pub map: DecodeMap,
    /// Softmax over the content symbols for every slot, indexed by token ID.
    pub rows: Vec<Vec<f64>>,
}

/// Decodes the 27 slots autoregressively, feeding back each argmax. The map
/// is not repaired into a bijection.
pub fn predict_dictionary<F: Scalar>(p: &ModelParams<F>, ciphertext: &TokenSeq) -> DictionaryPrediction {
    let heads = p.config.n_heads;
    let (mem, _, _) = encode_cached(p, ciphertext.ids());
    let cross: Vec<KeyValues<F>> = p
        .decoder
        .iter()
        .map(|l| project_kv(&l.cross_attn, &mem.view()))
        .collect();
    let mut tgt = vec![BOS];
    let mut map = [FIRST_CONTENT; ALPHABET_SIZE];
    let mut rows = Vec::with_capacity(ALPHABET_SIZE);
    for slot in map.iter_mut() {
        let mut y = embed(p, &tgt);
        for (layer, kv) in p.decoder.iter().zip(&cross) {
            let (h, _) = norm_fwd(&layer.norm_self, &y);
            let self_kv = project_kv(&layer.self_attn, &h.view());
            y += &attend(&layer.self_attn, &h.view(), &self_kv, heads, true).out;
            let (h, _) = norm_fwd(&layer.norm_cross, &y);
            y += &attend(&layer.cross_attn, &h.view(), kv, heads, false).out;
            let (h, _) = norm_fwd(&layer.norm_ff, &y);
            y += &ff_fwd(&layer.ff, &h).0;
        }
        let last = y.slice(ndarray::s![y.nrows() - 1.., ..]).to_owned();
        let (z, _) = norm_fwd(&p.dec_norm, &last);
        let logits = linear_fwd(&p.out, &z.view());
        let row = softmax_from(logits.row(0), FIRST_CONTENT as usize);
        let best = argmax_symbol(&row);
        *slot = best;
        tgt.push(best);
        rows.push(row);
    }
    DictionaryPrediction { map, rows }
}
