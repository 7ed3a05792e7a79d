use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::info_nce_on;
use crate::encoders::{pool_image, Bound, DualEncoder, ModelConfig};
use crate::error::{Error, Result};
use crate::mip::mip_loss_on;
use crate::numerics::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::ot_align::{
    aggregate_sentences_on, cost_matrix_on, ipot, spm_loss_on, CostMatrix, IpotConfig, SentenceSegments,
};
use crate::patching::{apply_mask, integrity_weights_on, IntegrityEstimator, MaskMatrix, PatchGrid};

use super::config::{ContrastiveMode, LossToggles, TrainConfig};

pub const TERM_NAMES: [&str; 4] = ["v2t", "t2v", "spm", "mip"];

/// Encoders, decoder and the integrity vector φ in one parameter store.
#[derive(Clone, Debug)]
pub struct Mlip {
    pub config: ModelConfig,
    pub net: DualEncoder,
    pub params: ParamStore,
    pub phi: ParamId,
}

impl Mlip {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DualEncoder::new(&mut params, &config, &mut rng)?;
        let phi = params.add("integrity.phi", Matrix::zeros(1, config.geometry.num_patches()));
        Ok(Self {
            config,
            net,
            params,
            phi,
        })
    }

    pub fn integrity(&self) -> IntegrityEstimator {
        IntegrityEstimator {
            phi: self.params.get(self.phi).clone(),
        }
    }
}

/// Min, mean and max of the integrity weights in a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl WeightStats {
    pub fn of(w: &[f64]) -> Self {
        if w.is_empty() {
            return Self::default();
        }
        Self {
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            mean: w.iter().sum::<f64>() / w.len() as f64,
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Loss terms of one batch; disabled terms are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_v2t: f64,
    pub l_t2v: f64,
    pub l_spm: f64,
    pub l_mip: f64,
    pub total: f64,
    pub w_stats: WeightStats,
}

impl LossBundle {
    pub fn parts(&self) -> [f64; 4] {
        [self.l_v2t, self.l_t2v, self.l_spm, self.l_mip]
    }
}

/// `Σ λ_k·part_k` over the enabled terms.
pub fn total_loss(parts: &[f64; 4], lambdas: &[f64; 4], toggles: &LossToggles) -> f64 {
    let enabled = toggles.enabled();
    let mut total = 0.0;
    for k in 0..4 {
        if enabled[k] {
            total += lambdas[k] * parts[k];
        }
    }
    total
}

/// Hyperparameters of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub tau: f64,
    pub lambdas: [f64; 4],
    pub toggles: LossToggles,
    pub ipot: IpotConfig,
}

impl From<&TrainConfig> for LossSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            tau: c.tau,
            lambdas: c.lambdas,
            toggles: c.losses,
            ipot: c.ipot(),
        }
    }
}

/// One training pair with its sampled mask.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub grid: &'a PatchGrid,
    pub tokens: &'a [usize],
    pub segments: &'a SentenceSegments,
    pub mask: MaskMatrix,
}

/// Where SPM transport plans come from. Plans never carry gradient; `Fixed`
/// reuses plans from an earlier solve, which finite-difference checks need.
#[derive(Clone, Copy, Debug)]
pub enum PlanMode<'a> {
    Solve,
    Fixed(&'a [Matrix]),
}

/// Tape nodes and values of one batch objective.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub total: Var,
    pub bundle: LossBundle,
    /// Plan used for each sample (empty matrices when SPM is off or skipped).
    pub plans: Vec<Matrix>,
}

fn mean_of(tape: &Tape, terms: &[Var]) -> Option<Var> {
    if terms.is_empty() {
        return None;
    }
    let sum = terms[1..].iter().fold(terms[0], |acc, &t| tape.add(acc, t));
    Some(tape.scale(sum, 1.0 / terms.len() as f64))
}

/// Builds the composite objective for `samples` on `b.tape`.
pub fn batch_objective(
    b: Bound,
    model: &Mlip,
    samples: &[Sample],
    settings: &LossSettings,
    plans: PlanMode,
    step: usize,
) -> Result<BatchForward> {
    let tape = b.tape;
    let net = &model.net;
    let toggles = settings.toggles;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v_glob = Vec::with_capacity(samples.len());
    let mut t_glob = Vec::with_capacity(samples.len());
    let mut spm_terms = Vec::new();
    let mut mip_terms = Vec::new();
    let mut used_plans = Vec::with_capacity(samples.len());

    for (i, s) in samples.iter().enumerate() {
        let visible = apply_mask(s.grid, &s.mask)?;
        let vf = net.image.forward(b, &visible)?;
        let tf = net.text.forward(b, s.tokens)?;
        v_glob.push(pool_image(tape, vf));
        t_glob.push(net.text.pool(b, tf));

        let mut plan = Matrix::zeros(0, 0);
        if toggles.spm {
            if s.segments.is_empty() {
                warn!("sample {i} at step {step} has no sentences; skipping its SPM term");
            } else {
                let l = visible.positions.len();
                let v_local = tape.gather_rows(vf, &(1..=l).collect::<Vec<_>>());
                let t_local = tape.gather_rows(tf, &(1..=s.tokens.len()).collect::<Vec<_>>());
                let t_sent = aggregate_sentences_on(tape, t_local, s.segments)?;
                let cost = cost_matrix_on(tape, v_local, t_sent)?;
                plan = match plans {
                    PlanMode::Solve => {
                        let c = CostMatrix(tape.value(cost).map(|x| x.clamp(0.0, 2.0)));
                        ipot(&c, &settings.ipot)?.gamma
                    }
                    PlanMode::Fixed(p) => p[i].clone(),
                };
                spm_terms.push(spm_loss_on(tape, cost, &plan)?);
            }
        }
        if toggles.mip {
            let rec = net.decoder.forward(b, vf, &visible.positions)?;
            mip_terms.push(mip_loss_on(tape, &s.grid.data, rec, &s.mask)?);
        }
        used_plans.push(plan);
    }

    let masks: Vec<MaskMatrix> = samples.iter().map(|s| s.mask.clone()).collect();
    let w = integrity_weights_on(tape, b.var(model.phi), &masks)?;
    let w_stats = WeightStats::of(tape.value(w).data());

    let mut terms: [Option<Var>; 4] = [None, None, mean_of(tape, &spm_terms), mean_of(tape, &mip_terms)];
    if toggles.contrastive != ContrastiveMode::Off {
        let v = tape.concat_rows(&v_glob);
        let t = tape.concat_rows(&t_glob);
        let weights = (toggles.contrastive == ContrastiveMode::Weighted).then_some(w);
        let pair = info_nce_on(tape, v, t, weights, settings.tau)?;
        terms[0] = Some(pair.v2t);
        terms[1] = Some(pair.t2v);
    }

    let mut parts = [0.0; 4];
    let mut total: Option<Var> = None;
    for k in 0..4 {
        let Some(term) = terms[k] else { continue };
        let value = tape.scalar(term);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: TERM_NAMES[k],
                step,
            });
        }
        parts[k] = value;
        let weighted = tape.scale(term, settings.lambdas[k]);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Matrix::scalar(0.0)));
    let value = tape.scalar(total);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total", step });
    }
    Ok(BatchForward {
        total,
        bundle: LossBundle {
            l_v2t: parts[0],
            l_t2v: parts[1],
            l_spm: parts[2],
            l_mip: parts[3],
            total: value,
            w_stats,
        },
        plans: used_plans,
    })
}
