use crate::error::{invalid, Result};
use crate::model::{FfnWeights, MoEModel, OptState};
use crate::numerics::Matrix;

/// Selection bias that keeps a lifted expert out of every top-K.
pub const NEVER_SELECTED: f64 = -1e9;

/// Embeds an `E`-expert model into the `m·E` space with all-zero extra
/// experts that can never be selected.
///
/// The extra router columns are zero and only the selection bias carries
/// the sentinel, so extra scores are exactly `-1e9` regardless of the
/// hidden state's sign.
pub fn canonical_lift(model: &MoEModel, m: usize) -> Result<MoEModel> {
    if m < 2 {
        return invalid(format!("expansion factor must be at least 2, got {m}"));
    }
    let e = model.config.experts;
    let (d, h) = (model.config.dim, model.config.expert_ffn_dim);
    let mut out = model.clone();
    out.config.experts = m * e;
    for layer in out.params.moe_layers_mut() {
        let mut router = Matrix::zeros(d, m * e);
        let mut bias = Matrix::filled(1, m * e, NEVER_SELECTED);
        for s in 0..e {
            router.set_col(s, &layer.router.col(s));
            bias.set(0, s, layer.select_bias.get(0, s));
        }
        layer.router = router;
        layer.select_bias = bias;
        layer.experts.resize(m * e, FfnWeights::zeros(d, h));
    }
    out.validate()?;
    Ok(out)
}

/// Optimizer state matching [`canonical_lift`]: zero moments for extras.
pub fn lift_opt_state(opt: &OptState, model_e: &MoEModel, m: usize) -> Result<OptState> {
    let zero = |p: &crate::model::Params| -> Result<crate::model::Params> {
        let wrapped = MoEModel {
            config: model_e.config.clone(),
            params: p.clone(),
        };
        let mut lifted = canonical_lift(&wrapped, m)?.params;
        for l in lifted.moe_layers_mut() {
            l.select_bias.fill(0.0);
        }
        Ok(lifted)
    };
    let mut out = opt.clone();
    out.m = zero(&opt.m)?;
    out.v = zero(&opt.v)?;
    Ok(out)
}
