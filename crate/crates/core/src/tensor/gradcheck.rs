//! Central finite-difference gradient checks against a 64-bit reference.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamId, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Perturbation applied to each checked entry.
    pub h: f64,
    /// Five-point stencil (truncation error O(h^4)) instead of three.
    pub five_point: bool,
    /// Entries checked per parameter; larger tensors are sampled.
    pub max_entries: usize,
    /// Denominator floor so all-zero gradients compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            five_point: false,
            max_entries: usize::MAX,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Outcome for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// `max|analytic - numeric| / max(max|numeric|, max|analytic|, floor)`.
    pub rel_err: f64,
    /// Largest gradient magnitude seen on the checked entries.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares `analytic` gradients (at precision `R`) with central
/// differences of `numeric`, evaluated on a 64-bit copy of the
/// parameters. Only trainable parameters are checked.
pub fn grad_check<R: Real, E>(
    params: &ParamStore<R>,
    analytic: impl Fn(&ParamStore<R>) -> Result<Gradients<R>, E>,
    numeric: impl Fn(&ParamStore<f64>) -> Result<f64, E>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E> {
    let grads = analytic(params)?;
    let mut p64 = params.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    let ids: Vec<ParamId> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = params.get(id).value.numel();
        let entries: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let g = grads.get(id);
        let (mut diff, mut scale) = (0.0f64, opts.floor);
        for &e in &entries {
            let orig = p64.get(id).value.data()[e];
            let mut at = |x: f64| {
                p64.get_mut(id).value.data_mut()[e] = x;
                numeric(&p64)
            };
            let h = opts.h;
            let d1 = at(orig + h)? - at(orig - h)?;
            let num = if opts.five_point {
                let d2 = at(orig + 2.0 * h)? - at(orig - 2.0 * h)?;
                (8.0 * d1 - d2) / (12.0 * h)
            } else {
                d1 / (2.0 * h)
            };
            p64.get_mut(id).value.data_mut()[e] = orig;
            let ana = g.map_or(0.0, |t| t.data()[e].as_f64());
            diff = diff.max((ana - num).abs());
            scale = scale.max(num.abs()).max(ana.abs());
        }
        out.push(ParamCheck {
            name: params.get(id).name.clone(),
            checked: entries.len(),
            rel_err: diff / scale,
            scale,
        });
    }
    Ok(GradCheckReport { params: out })
}
