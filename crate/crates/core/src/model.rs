//! The full network: input projections, optional hybrid attention, shared
//! snippet classifier and MMIL pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::VideoBag;
use crate::error::{Error, Result};
use crate::han::{
    han_backward, han_forward_cached, project_inputs, project_inputs_backward, HanCache, HanParams,
};
use crate::losses::{total_loss, total_loss_grad, LossBreakdown, LossSettings};
use crate::mmil::{
    classify_backward, classify_snippets, pool, pool_backward, MmilParams, PoolOutput, Pooling,
    SnippetProbs,
};
use crate::numeric::{join_name, Matrix, ParamRef, Parameterized};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Temporal {
    /// Projected features go straight to the classifier.
    None,
    #[default]
    Han,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_a: usize,
    pub d_v: usize,
    pub width: usize,
    pub classes: usize,
    pub temporal: Temporal,
    pub pooling: Pooling,
    pub learned_attention: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_a", self.d_a),
            ("d_v", self.d_v),
            ("width", self.width),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!(
                    "model {name} must be at least 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub han: HanParams,
    pub mmil: MmilParams,
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let han = HanParams::new(
            config.d_a,
            config.d_v,
            config.width,
            config.learned_attention,
            rng,
        );
        let mmil = MmilParams::new(config.width, config.classes, rng);
        Ok(Self { config, han, mmil })
    }

    /// Order-sensitive FNV-1a hash over all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit_params_ref("", &mut |_, values, _| {
            for v in values {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
                }
            }
        });
        h
    }
}

impl Parameterized for ModelParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.han.visit_params(&join_name(prefix, "han"), f);
        self.mmil.visit_params(&join_name(prefix, "mmil"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64], &[f64])) {
        self.han.visit_params_ref(&join_name(prefix, "han"), f);
        self.mmil.visit_params_ref(&join_name(prefix, "mmil"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub probs: SnippetProbs,
    pub pool: PoolOutput,
    ha: Matrix,
    hv: Matrix,
    han: Option<HanCache>,
}

pub fn forward(params: &ModelParams, bag: &VideoBag) -> Result<Forward> {
    let (fa, fv) = project_inputs(bag, &params.han)?;
    let (ha, hv, han) = match params.config.temporal {
        Temporal::None => (fa, fv, None),
        Temporal::Han => {
            let (out, cache) = han_forward_cached(&fa, &fv, &params.han)?;
            (out.audio, out.visual, Some(cache))
        }
    };
    let probs = classify_snippets(&ha, &hv, &params.mmil)?;
    let pool = pool(params.config.pooling, &ha, &hv, &probs, &params.mmil)?;
    Ok(Forward {
        probs,
        pool,
        ha,
        hv,
        han,
    })
}

/// Snippet probabilities only.
pub fn predict(params: &ModelParams, bag: &VideoBag) -> Result<SnippetProbs> {
    forward(params, bag).map(|f| f.probs)
}

fn backward(
    params: &mut ModelParams,
    bag: &VideoBag,
    fwd: &Forward,
    grads: &crate::mmil::PoolGrads,
) -> Result<()> {
    let pooling = params.config.pooling;
    let (dpa, dpv, mut dha, mut dhv) = pool_backward(
        pooling,
        &mut params.mmil,
        &fwd.ha,
        &fwd.hv,
        &fwd.probs,
        &fwd.pool,
        grads,
    )?;
    let (cha, chv) = classify_backward(&mut params.mmil, &fwd.ha, &fwd.hv, &fwd.probs, &dpa, &dpv)?;
    dha.add_assign(&cha)?;
    dhv.add_assign(&chv)?;
    let (dfa, dfv) = match &fwd.han {
        Some(cache) => han_backward(&mut params.han, cache, &dha, &dhv)?,
        None => (dha, dhv),
    };
    project_inputs_backward(bag, &mut params.han, &dfa, &dfv)
}

/// One training example.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub bag: &'a VideoBag,
    pub label: &'a [bool],
}

fn check_batch(batch: &[Example<'_>], params: &ModelParams) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for ex in batch {
        if ex.label.len() != params.config.classes {
            return Err(Error::shape(
                "weak label length",
                params.config.classes,
                ex.label.len(),
            ));
        }
    }
    Ok(())
}

/// Mean loss over the batch.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[Example<'_>],
    settings: &LossSettings,
) -> Result<LossBreakdown> {
    check_batch(batch, params)?;
    let w = 1.0 / batch.len() as f64;
    let mut total = LossBreakdown::default();
    for ex in batch {
        let fwd = forward(params, ex.bag)?;
        total.accumulate(&total_loss(&fwd.pool, ex.label, settings)?, w);
    }
    Ok(total)
}

/// Mean loss over the batch; gradients are accumulated into `params`.
pub fn loss_and_grad(
    params: &mut ModelParams,
    batch: &[Example<'_>],
    settings: &LossSettings,
) -> Result<LossBreakdown> {
    check_batch(batch, params)?;
    let w = 1.0 / batch.len() as f64;
    let mut total = LossBreakdown::default();
    for ex in batch {
        let fwd = forward(params, ex.bag)?;
        total.accumulate(&total_loss(&fwd.pool, ex.label, settings)?, w);
        let grads = total_loss_grad(&fwd.pool, ex.label, settings, w)?;
        backward(params, ex.bag, &fwd, &grads)?;
    }
    Ok(total)
}
