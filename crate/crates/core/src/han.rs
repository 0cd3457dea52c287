//! Hybrid attention network.
//!
//! Both modality streams are first projected to a shared width `d`. Each
//! stream is then updated with a residual sum of self-attention over its own
//! snippets and cross-modal attention over the other stream's snippets:
//!
//! ```text
//! ĥf_a = f_a + att(f_a, f_a) + att(f_a, f_v)
//! ĥf_v = f_v + att(f_v, f_v) + att(f_v, f_a)
//! att(q, kv) = softmax(q·kvᵀ / √d) · kv
//! ```
//!
//! There is no positional encoding, so the update is equivariant to
//! permutations of the time axis.

use rand::Rng;

use crate::datamodel::VideoBag;
use crate::error::{Error, Result};
use crate::numeric::{
    join_name, softmax_backward, softmax_in_place, LinearLayer, Matrix, ParamRef, Parameterized,
};

/// Row-stochastic `T x T` attention weights, one row per query snippet.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Matrix,
}

impl AttentionMap {
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|r| self.weights.row(r).iter().sum())
            .collect()
    }
}

/// The four attention functions, in the order their maps are reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    AudioSelf,
    AudioCross,
    VisualSelf,
    VisualCross,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::AudioSelf,
        AttentionKind::AudioCross,
        AttentionKind::VisualSelf,
        AttentionKind::VisualCross,
    ];

    fn name(self) -> &'static str {
        match self {
            AttentionKind::AudioSelf => "audio_self",
            AttentionKind::AudioCross => "audio_cross",
            AttentionKind::VisualSelf => "visual_self",
            AttentionKind::VisualCross => "visual_cross",
        }
    }
}

/// Optional learned query/key projections, one pair per attention function.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjections {
    pub query: [LinearLayer; 4],
    pub key: [LinearLayer; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HanParams {
    pub audio_proj: LinearLayer,
    pub visual_proj: LinearLayer,
    pub attention: Option<AttentionProjections>,
    width: usize,
}

impl HanParams {
    pub fn new<R: Rng + ?Sized>(
        d_a: usize,
        d_v: usize,
        width: usize,
        learned_attention: bool,
        rng: &mut R,
    ) -> Self {
        let audio_proj = LinearLayer::new(d_a, width, true, rng);
        let visual_proj = LinearLayer::new(d_v, width, true, rng);
        let attention = learned_attention.then(|| AttentionProjections {
            // bias-free query/key maps
            query: std::array::from_fn(|_| LinearLayer::new(width, width, false, rng)),
            key: std::array::from_fn(|_| LinearLayer::new(width, width, false, rng)),
        });
        Self {
            audio_proj,
            visual_proj,
            attention,
            width,
        }
    }

    pub fn from_projections(audio_proj: LinearLayer, visual_proj: LinearLayer) -> Result<Self> {
        if audio_proj.out_dim() != visual_proj.out_dim() || audio_proj.out_dim() == 0 {
            return Err(Error::shape(
                "HanParams",
                format!("equal positive widths, audio {}", audio_proj.out_dim()),
                visual_proj.out_dim(),
            ));
        }
        Ok(Self {
            width: audio_proj.out_dim(),
            audio_proj,
            visual_proj,
            attention: None,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

impl Parameterized for HanParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.audio_proj
            .visit_params(&join_name(prefix, "audio_proj"), f);
        self.visual_proj
            .visit_params(&join_name(prefix, "visual_proj"), f);
        if let Some(att) = &mut self.attention {
            for (i, kind) in AttentionKind::ALL.iter().enumerate() {
                att.query[i].visit_params(&join_name(prefix, &format!("{}.query", kind.name())), f);
                att.key[i].visit_params(&join_name(prefix, &format!("{}.key", kind.name())), f);
            }
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64], &[f64])) {
        self.audio_proj
            .visit_params_ref(&join_name(prefix, "audio_proj"), f);
        self.visual_proj
            .visit_params_ref(&join_name(prefix, "visual_proj"), f);
        if let Some(att) = &self.attention {
            for (i, kind) in AttentionKind::ALL.iter().enumerate() {
                att.query[i]
                    .visit_params_ref(&join_name(prefix, &format!("{}.query", kind.name())), f);
                att.key[i].visit_params_ref(&join_name(prefix, &format!("{}.key", kind.name())), f);
            }
        }
    }
}

/// Linear projection of both streams to the shared width (no nonlinearity).
pub fn project_inputs(bag: &VideoBag, params: &HanParams) -> Result<(Matrix, Matrix)> {
    if bag.audio.cols() != params.audio_proj.in_dim() {
        return Err(Error::shape(
            "project_inputs audio width",
            params.audio_proj.in_dim(),
            bag.audio.cols(),
        ));
    }
    if bag.visual.cols() != params.visual_proj.in_dim() {
        return Err(Error::shape(
            "project_inputs visual width",
            params.visual_proj.in_dim(),
            bag.visual.cols(),
        ));
    }
    Ok((
        params.audio_proj.forward(&bag.audio)?,
        params.visual_proj.forward(&bag.visual)?,
    ))
}

/// Accumulates projection gradients for upstream `dfa`, `dfv`.
pub fn project_inputs_backward(
    bag: &VideoBag,
    params: &mut HanParams,
    dfa: &Matrix,
    dfv: &Matrix,
) -> Result<()> {
    params.audio_proj.backward(&bag.audio, dfa)?;
    params.visual_proj.backward(&bag.visual, dfv)?;
    Ok(())
}

/// Scaled dot-product attention with raw features on both sides.
pub fn attend(query_seq: &Matrix, key_value_seq: &Matrix) -> Result<(Matrix, AttentionMap)> {
    let cache = attend_cached(query_seq, key_value_seq, None)?;
    Ok((cache.out, AttentionMap { weights: cache.map }))
}

#[derive(Clone, Debug)]
struct AttentionCache {
    query_in: Matrix,
    kv: Matrix,
    queries: Matrix,
    keys: Matrix,
    map: Matrix,
    out: Matrix,
}

fn attend_cached(
    query_seq: &Matrix,
    key_value_seq: &Matrix,
    proj: Option<(&LinearLayer, &LinearLayer)>,
) -> Result<AttentionCache> {
    if query_seq.cols() != key_value_seq.cols() {
        return Err(Error::shape(
            "attend width",
            query_seq.cols(),
            key_value_seq.cols(),
        ));
    }
    if query_seq.rows() == 0 || key_value_seq.rows() == 0 {
        return Err(Error::InvalidArgument(
            "attention needs at least one snippet".into(),
        ));
    }
    let (queries, keys) = match proj {
        Some((q, k)) => (q.forward(query_seq)?, k.forward(key_value_seq)?),
        None => (query_seq.clone(), key_value_seq.clone()),
    };
    let scale = 1.0 / (query_seq.cols() as f64).sqrt();
    let mut map = queries.matmul_t(&keys)?.scale(scale);
    for r in 0..map.rows() {
        softmax_in_place(map.row_mut(r));
    }
    let out = map.matmul(key_value_seq)?;
    Ok(AttentionCache {
        query_in: query_seq.clone(),
        kv: key_value_seq.clone(),
        queries,
        keys,
        map,
        out,
    })
}

/// Returns `(d query_seq, d key_value_seq)` and accumulates projection grads.
fn attend_backward(
    cache: &AttentionCache,
    dout: &Matrix,
    proj: Option<(&mut LinearLayer, &mut LinearLayer)>,
) -> Result<(Matrix, Matrix)> {
    let scale = 1.0 / (cache.query_in.cols() as f64).sqrt();
    let dmap = dout.matmul_t(&cache.kv)?;
    let mut dkv = cache.map.t_matmul(dout)?;
    let mut dlogits = Matrix::zeros(dmap.rows(), dmap.cols());
    for r in 0..dmap.rows() {
        let g = softmax_backward(cache.map.row(r), dmap.row(r));
        dlogits.row_mut(r).copy_from_slice(&g);
    }
    let dlogits = dlogits.scale(scale);
    let dq = dlogits.matmul(&cache.keys)?;
    let dk = dlogits.t_matmul(&cache.queries)?;
    let dquery = match proj {
        Some((q, k)) => {
            dkv.add_assign(&k.backward(&cache.kv, &dk)?)?;
            q.backward(&cache.query_in, &dq)?
        }
        None => {
            dkv.add_assign(&dk)?;
            dq
        }
    };
    Ok((dquery, dkv))
}

#[derive(Clone, Debug)]
pub struct HanOutput {
    pub audio: Matrix,
    pub visual: Matrix,
    /// Audio-self, audio-cross, visual-self, visual-cross.
    pub maps: [AttentionMap; 4],
}

#[derive(Clone, Debug)]
pub struct HanCache {
    attn: [AttentionCache; 4],
}

fn proj_pair(params: &HanParams, i: usize) -> Option<(&LinearLayer, &LinearLayer)> {
    params.attention.as_ref().map(|a| (&a.query[i], &a.key[i]))
}

pub fn han_forward(fa: &Matrix, fv: &Matrix, params: &HanParams) -> Result<HanOutput> {
    han_forward_cached(fa, fv, params).map(|(o, _)| o)
}

pub fn han_forward_cached(
    fa: &Matrix,
    fv: &Matrix,
    params: &HanParams,
) -> Result<(HanOutput, HanCache)> {
    if fa.shape() != fv.shape() {
        return Err(Error::shape(
            "han_forward",
            format!("{:?}", fa.shape()),
            format!("{:?}", fv.shape()),
        ));
    }
    if fa.cols() != params.width() {
        return Err(Error::shape("han_forward width", params.width(), fa.cols()));
    }
    let pairs = [(fa, fa), (fa, fv), (fv, fv), (fv, fa)];
    let mut caches = Vec::with_capacity(4);
    for (i, (q, kv)) in pairs.into_iter().enumerate() {
        caches.push(attend_cached(q, kv, proj_pair(params, i))?);
    }
    let attn: [AttentionCache; 4] = caches.try_into().expect("four attention caches");

    let mut audio = fa.add(&attn[0].out)?;
    audio.add_assign(&attn[1].out)?;
    let mut visual = fv.add(&attn[2].out)?;
    visual.add_assign(&attn[3].out)?;
    let maps = std::array::from_fn(|i| AttentionMap {
        weights: attn[i].map.clone(),
    });
    Ok((
        HanOutput {
            audio,
            visual,
            maps,
        },
        HanCache { attn },
    ))
}

/// Backpropagates through the residual attention update; returns `(dfa, dfv)`.
pub fn han_backward(
    params: &mut HanParams,
    cache: &HanCache,
    dha: &Matrix,
    dhv: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let mut dfa = dha.clone();
    let mut dfv = dhv.clone();
    // (query is audio?, key/value is audio?, upstream is audio?)
    let routes = [
        (true, true, true),
        (true, false, true),
        (false, false, false),
        (false, true, false),
    ];
    for (i, (q_audio, kv_audio, up_audio)) in routes.into_iter().enumerate() {
        let upstream = if up_audio { dha } else { dhv };
        let proj = params.attention.as_mut().map(|a| {
            let (q, k) = (&mut a.query[i], &mut a.key[i]);
            (q, k)
        });
        let (dq, dkv) = attend_backward(&cache.attn[i], upstream, proj)?;
        if q_audio { &mut dfa } else { &mut dfv }.add_assign(&dq)?;
        if kv_audio { &mut dfa } else { &mut dfv }.add_assign(&dkv)?;
    }
    Ok((dfa, dfv))
}
